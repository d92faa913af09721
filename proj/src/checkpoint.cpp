#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "refgame/io.hpp"

namespace refgame::io {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'R', 'G', 'C', 'K'};

uint64_t fnv1a64(const std::string& bytes) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// little-endian scalar encoding, independent of host byte order

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.append(s);
}

// bounds-checked reader over a loaded payload
struct Reader {
    const std::string& bytes;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n) const {
        if (pos + n > bytes.size())
            throw DataError("checkpoint '" + path + "': truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
        return v;
    }
    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s = bytes.substr(pos, n);
        pos += n;
        return s;
    }
};

std::string encode_arrays(const std::vector<NamedArray>& arrays) {
    std::string out;
    put_u32(out, static_cast<uint32_t>(arrays.size()));
    for (const auto& a : arrays) {
        put_str(out, a.name);
        put_u32(out, static_cast<uint32_t>(a.shape.size()));
        int64_t numel = 1;
        for (int64_t d : a.shape) {
            put_u64(out, static_cast<uint64_t>(d));
            numel *= d;
        }
        if (numel != static_cast<int64_t>(a.values.size()))
            throw std::logic_error("checkpoint: array '" + a.name +
                                   "' shape does not match its value count");
        for (float v : a.values) put_f32(out, v);
    }
    return out;
}

std::vector<NamedArray> decode_arrays(const std::string& payload, const std::string& path) {
    Reader r{payload, 0, path};
    const uint32_t count = r.u32();
    std::vector<NamedArray> arrays;
    arrays.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = r.str();
        const uint32_t ndim = r.u32();
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            a.shape.push_back(static_cast<int64_t>(r.u64()));
            numel *= a.shape.back();
        }
        if (numel < 0 || numel > (1ll << 32))
            throw DataError("checkpoint '" + path + "': array '" + a.name +
                            "' has an implausible shape");
        a.values.reserve(static_cast<size_t>(numel));
        for (int64_t k = 0; k < numel; ++k) a.values.push_back(r.f32());
        arrays.push_back(std::move(a));
    }
    if (r.pos != payload.size())
        throw DataError("checkpoint '" + path + "': trailing bytes in the array block");
    return arrays;
}

void put_block(std::string& out, const std::string& payload) {
    put_u64(out, payload.size());
    out.append(payload);
    put_u64(out, fnv1a64(payload));
}

std::string read_block(Reader& r, const char* what) {
    const uint64_t len = r.u64();
    r.need(len);
    std::string payload = r.bytes.substr(r.pos, len);
    r.pos += len;
    const uint64_t want = r.u64();
    if (fnv1a64(payload) != want)
        throw DataError("checkpoint '" + r.path + "': checksum mismatch in the " +
                        std::string(what) + " block (file corrupt)");
    return payload;
}

json parse_descriptor(const ModelCheckpoint& m) {
    try {
        return json::parse(m.descriptor);
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: descriptor is not valid json: ") + e.what());
    }
}

world::Vocabulary vocabulary_from_tokens(const std::vector<std::string>& tokens) {
    if (tokens.size() < 3 || tokens[0] != "<s>" || tokens[1] != "</s>" || tokens[2] != "<UNK>")
        throw DataError("checkpoint: vocabulary does not start with the three sentinels");
    return world::Vocabulary::from_content({tokens.begin() + 3, tokens.end()});
}

// parameters, buffers, and optimizer moments flattened to named arrays

NamedArray array_from_tensor(const std::string& name, const ad::TensorPtr& t) {
    NamedArray a;
    a.name = name;
    a.shape = t->shape;
    a.values.reserve(static_cast<size_t>(t->numel()));
    for (int64_t i = 0; i < t->numel(); ++i) a.values.push_back(static_cast<float>(t->read(i)));
    return a;
}

NamedArray array_from_doubles(const std::string& name, const std::vector<double>& vals) {
    NamedArray a;
    a.name = name;
    a.shape = {static_cast<int64_t>(vals.size())};
    a.values.reserve(vals.size());
    for (double v : vals) a.values.push_back(static_cast<float>(v));
    return a;
}

void pack_state(std::vector<NamedArray>& arrays, const nn::ParamList& params,
                const nn::ParamList& buffers, const nn::AdamState* opt) {
    for (const auto& p : params) arrays.push_back(array_from_tensor(p.name, p.t));
    for (const auto& b : buffers) arrays.push_back(array_from_tensor(b.name, b.t));
    if (opt && !opt->empty()) {
        if (opt->m.size() != params.size())
            throw std::logic_error("checkpoint: optimizer state does not match the parameters");
        for (size_t i = 0; i < params.size(); ++i) {
            arrays.push_back(array_from_doubles("opt.m:" + params[i].name, opt->m[i]));
            arrays.push_back(array_from_doubles("opt.v:" + params[i].name, opt->v[i]));
        }
    }
}

const NamedArray* find_array(const std::vector<NamedArray>& arrays, const std::string& name) {
    for (const auto& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

void write_tensor(const NamedArray& a, const ad::TensorPtr& t) {
    if (a.shape != t->shape) {
        std::ostringstream msg;
        msg << "checkpoint: array '" << a.name << "' has " << a.values.size()
            << " values where the model expects " << t->numel();
        throw DataError(msg.str());
    }
    for (int64_t i = 0; i < t->numel(); ++i) t->write(i, static_cast<double>(a.values[i]));
}

void unpack_state(const ModelCheckpoint& m, const nn::ParamList& params,
                  const nn::ParamList& buffers, int64_t opt_step, nn::AdamState* opt) {
    for (const auto& p : params) {
        const NamedArray* a = find_array(m.arrays, p.name);
        if (!a) throw DataError("checkpoint: missing parameter array '" + p.name + "'");
        write_tensor(*a, p.t);
    }
    for (const auto& b : buffers) {
        const NamedArray* a = find_array(m.arrays, b.name);
        if (!a) throw DataError("checkpoint: missing buffer array '" + b.name + "'");
        write_tensor(*a, b.t);
    }
    if (!opt) return;
    *opt = nn::AdamState{};
    bool any = false, all = true;
    for (const auto& p : params) {
        const NamedArray* am = find_array(m.arrays, "opt.m:" + p.name);
        const NamedArray* av = find_array(m.arrays, "opt.v:" + p.name);
        if (am && av) {
            any = true;
            opt->m.emplace_back(am->values.begin(), am->values.end());
            opt->v.emplace_back(av->values.begin(), av->values.end());
        } else {
            all = false;
        }
    }
    if (any && !all)
        throw DataError("checkpoint: optimizer arrays cover only part of the parameters");
    if (!any) {
        opt->m.clear();
        opt->v.clear();
        return;
    }
    opt->step_count = opt_step;
}

}  // namespace

void save_checkpoint(const ModelCheckpoint& m, const std::string& path) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, m.version);
    put_block(out, m.descriptor);
    put_block(out, encode_arrays(m.arrays));
    put_block(out, m.rng_state);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("checkpoint: cannot write '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("checkpoint: write failed for '" + path + "'");
}

ModelCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << f.rdbuf();
    const std::string bytes = buf.str();

    Reader r{bytes, 0, path};
    r.need(4);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw DataError("checkpoint: '" + path + "' is not a checkpoint file");
    r.pos = 4;

    ModelCheckpoint m;
    m.version = r.u32();
    if (m.version != kCheckpointVersion) {
        std::ostringstream msg;
        msg << "checkpoint '" << path << "': format version " << m.version << " (expected "
            << kCheckpointVersion << ")";
        throw DataError(msg.str());
    }
    m.descriptor = read_block(r, "descriptor");
    m.arrays = decode_arrays(read_block(r, "array"), path);
    m.rng_state = read_block(r, "rng");
    if (r.pos != bytes.size())
        throw DataError("checkpoint '" + path + "': trailing bytes after the last block");
    return m;
}

std::string checkpoint_model_kind(const ModelCheckpoint& m) {
    const json d = parse_descriptor(m);
    if (!d.contains("model") || !d["model"].is_string())
        throw DataError("checkpoint: descriptor lacks the model kind");
    return d["model"].get<std::string>();
}

std::vector<std::string> checkpoint_vocabulary(const ModelCheckpoint& m) {
    const json d = parse_descriptor(m);
    if (!d.contains("vocabulary") || !d["vocabulary"].is_array())
        throw DataError("checkpoint: descriptor lacks the vocabulary");
    return d["vocabulary"].get<std::vector<std::string>>();
}

// ------------------------------------------------------------------ listener

ModelCheckpoint checkpoint_listener(const agents::LiteralListener& L, const nn::AdamState* opt,
                                    const std::string& rng_state) {
    json d;
    d["model"] = "listener";
    d["vocabulary"] = L.vocab.tokens;
    d["config"] = {{"image_size", L.cfg.image_size}, {"embed_dim", L.cfg.embed_dim},
                   {"hidden", L.cfg.hidden},         {"lr", L.cfg.lr},
                   {"max_epochs", L.cfg.max_epochs}, {"batch", L.cfg.batch},
                   {"patience", L.cfg.patience}};
    d["frozen"] = L.frozen();
    d["optimizer_step"] = opt ? opt->step_count : 0;

    ModelCheckpoint m;
    m.descriptor = d.dump(2);
    pack_state(m.arrays, L.params("listener"), L.buffers("listener"), opt);
    m.rng_state = rng_state;
    return m;
}

std::shared_ptr<agents::LiteralListener> listener_from_checkpoint(const ModelCheckpoint& m,
                                                                  nn::AdamState* opt,
                                                                  std::string* rng_state) {
    const json d = parse_descriptor(m);
    if (checkpoint_model_kind(m) != "listener")
        throw DataError("checkpoint: describes a '" + checkpoint_model_kind(m) +
                        "', not a listener");
    agents::ListenerConfig cfg;
    const json& c = d.at("config");
    cfg.image_size = c.at("image_size").get<int>();
    cfg.embed_dim = c.at("embed_dim").get<int64_t>();
    cfg.hidden = c.at("hidden").get<int64_t>();
    cfg.lr = c.at("lr").get<double>();
    cfg.max_epochs = c.at("max_epochs").get<int>();
    cfg.batch = c.at("batch").get<int>();
    cfg.patience = c.at("patience").get<int>();

    auto L = std::make_shared<agents::LiteralListener>(vocabulary_from_tokens(checkpoint_vocabulary(m)),
                                                       cfg, /*seed=*/0);
    unpack_state(m, L->params("listener"), L->buffers("listener"),
                 d.value("optimizer_step", int64_t{0}), opt);
    if (d.value("frozen", false)) L->freeze();
    if (rng_state) *rng_state = m.rng_state;
    return L;
}

// ------------------------------------------------------------------- speaker

ModelCheckpoint checkpoint_speaker(const agents::SpeakerCore& core, agents::Variant variant,
                                   double lambda, const nn::AdamState* opt,
                                   const std::string& rng_state) {
    json d;
    d["model"] = "speaker";
    d["variant"] = agents::variant_name(variant);
    d["lambda"] = lambda;
    d["vocabulary"] = core.vocab.tokens;
    d["config"] = {{"contextual", core.cfg.contextual},
                   {"image_size", core.cfg.image_size},
                   {"embed_dim", core.cfg.embed_dim},
                   {"hidden", core.cfg.hidden},
                   {"max_len", core.cfg.max_len},
                   {"lr", core.cfg.lr},
                   {"max_epochs", core.cfg.max_epochs},
                   {"batch", core.cfg.batch},
                   {"patience", core.cfg.patience}};
    d["trained"] = core.trained;
    d["optimizer_step"] = opt ? opt->step_count : 0;

    ModelCheckpoint m;
    m.descriptor = d.dump(2);
    pack_state(m.arrays, core.params("speaker"), core.buffers("speaker"), opt);
    m.rng_state = rng_state;
    return m;
}

std::shared_ptr<agents::SpeakerCore> speaker_from_checkpoint(const ModelCheckpoint& m,
                                                             agents::Variant* variant,
                                                             double* lambda, nn::AdamState* opt,
                                                             std::string* rng_state) {
    const json d = parse_descriptor(m);
    if (checkpoint_model_kind(m) != "speaker")
        throw DataError("checkpoint: describes a '" + checkpoint_model_kind(m) +
                        "', not a speaker");
    agents::SpeakerConfig cfg;
    const json& c = d.at("config");
    cfg.contextual = c.at("contextual").get<bool>();
    cfg.image_size = c.at("image_size").get<int>();
    cfg.embed_dim = c.at("embed_dim").get<int64_t>();
    cfg.hidden = c.at("hidden").get<int64_t>();
    cfg.max_len = c.at("max_len").get<int>();
    cfg.lr = c.at("lr").get<double>();
    cfg.max_epochs = c.at("max_epochs").get<int>();
    cfg.batch = c.at("batch").get<int>();
    cfg.patience = c.at("patience").get<int>();

    auto core = std::make_shared<agents::SpeakerCore>(
        vocabulary_from_tokens(checkpoint_vocabulary(m)), cfg, /*seed=*/0);
    unpack_state(m, core->params("speaker"), core->buffers("speaker"),
                 d.value("optimizer_step", int64_t{0}), opt);
    core->trained = d.value("trained", false);
    if (variant) *variant = agents::parse_variant(d.at("variant").get<std::string>());
    if (lambda) *lambda = d.at("lambda").get<double>();
    if (rng_state) *rng_state = m.rng_state;
    return core;
}

// ------------------------------------------------------------ language model

ModelCheckpoint checkpoint_lm(const harness::LanguageModel& lm, const nn::AdamState* opt,
                              const std::string& rng_state) {
    json d;
    d["model"] = "language-model";
    d["vocabulary"] = lm.vocab.tokens;
    d["config"] = {{"hidden", lm.hidden}, {"embed_dim", lm.emb.table->shape[1]}};
    d["optimizer_step"] = opt ? opt->step_count : 0;

    ModelCheckpoint m;
    m.descriptor = d.dump(2);
    pack_state(m.arrays, lm.params("lm"), {}, opt);
    m.rng_state = rng_state;
    return m;
}

std::shared_ptr<harness::LanguageModel> lm_from_checkpoint(const ModelCheckpoint& m,
                                                           nn::AdamState* opt,
                                                           std::string* rng_state) {
    const json d = parse_descriptor(m);
    if (checkpoint_model_kind(m) != "language-model")
        throw DataError("checkpoint: describes a '" + checkpoint_model_kind(m) +
                        "', not a language model");
    const json& c = d.at("config");
    auto lm = std::make_shared<harness::LanguageModel>(
        vocabulary_from_tokens(checkpoint_vocabulary(m)), c.at("hidden").get<int64_t>(),
        c.at("embed_dim").get<int64_t>(), /*seed=*/0);
    unpack_state(m, lm->params("lm"), {}, d.value("optimizer_step", int64_t{0}), opt);
    if (rng_state) *rng_state = m.rng_state;
    return lm;
}

}  // namespace refgame::io
