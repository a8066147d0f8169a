#include "acllm/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace acllm {

namespace {

constexpr char kMagic[4] = {'A', 'C', 'L', 'K'};

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

const CkptEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

bool valid_stage_tag(const std::string& stage) {
    return stage == "ssl_iter1" || stage == "ssl_iter2" || stage == "sft" ||
           stage == "context_sft" || stage == "rl";
}

void save_checkpoint(const std::string& path, const Checkpoint& c) {
    if (!valid_stage_tag(c.meta.stage))
        throw std::invalid_argument("checkpoint: bad stage tag " + c.meta.stage);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
    os.write(kMagic, 4);
    put_u32(os, c.version);
    put_u32(os, static_cast<uint32_t>(c.entries.size()));
    for (const auto& e : c.entries) {
        if (static_cast<size_t>(e.rows) * e.cols != e.values.size())
            throw std::invalid_argument("checkpoint: shape mismatch for " + e.name);
        put_u32(os, static_cast<uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put_u32(os, static_cast<uint32_t>(e.rows));
        put_u32(os, static_cast<uint32_t>(e.cols));
        os.write(reinterpret_cast<const char*>(e.values.data()),
                 static_cast<std::streamsize>(e.values.size() * sizeof(float)));
    }
    nlohmann::json meta = {{"stage", c.meta.stage},
                           {"config_hash", c.meta.config_hash},
                           {"seed", c.meta.seed},
                           {"step_count", c.meta.step_count},
                           {"extra", nlohmann::json::parse(c.meta.extra_json)}};
    std::string trailer = meta.dump();
    os.write(trailer.data(), static_cast<std::streamsize>(trailer.size()));
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot read " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    Checkpoint c;
    c.version = get_u32(is);
    if (c.version != 1) throw std::runtime_error("checkpoint: unknown version");
    uint32_t n = get_u32(is);
    c.entries.resize(n);
    for (auto& e : c.entries) {
        uint32_t len = get_u32(is);
        e.name.resize(len);
        is.read(e.name.data(), len);
        e.rows = static_cast<int>(get_u32(is));
        e.cols = static_cast<int>(get_u32(is));
        e.values.resize(static_cast<size_t>(e.rows) * e.cols);
        is.read(reinterpret_cast<char*>(e.values.data()),
                static_cast<std::streamsize>(e.values.size() * sizeof(float)));
        if (!is) throw std::runtime_error("checkpoint: truncated entry " + e.name);
    }
    std::string trailer((std::istreambuf_iterator<char>(is)),
                        std::istreambuf_iterator<char>());
    nlohmann::json meta = nlohmann::json::parse(trailer);
    c.meta.stage = meta.at("stage").get<std::string>();
    c.meta.config_hash = meta.at("config_hash").get<std::string>();
    c.meta.seed = meta.at("seed").get<uint64_t>();
    c.meta.step_count = meta.at("step_count").get<int64_t>();
    c.meta.extra_json = meta.at("extra").dump();
    if (!valid_stage_tag(c.meta.stage))
        throw std::runtime_error("checkpoint: bad stage tag " + c.meta.stage);
    return c;
}

void store_to_checkpoint(const ParamStore& store, Checkpoint& c) {
    for (const auto& p : store.params()) {
        CkptEntry e;
        e.name = p.name;
        e.rows = p.tensor.rows();
        e.cols = p.tensor.cols();
        e.values = p.tensor.impl->v;
        c.entries.push_back(std::move(e));
    }
}

void checkpoint_to_store(const Checkpoint& c, ParamStore& store) {
    for (auto& p : store.params()) {
        const CkptEntry* e = c.find(p.name);
        if (!e) throw std::runtime_error("checkpoint: missing parameter " + p.name);
        if (e->rows != p.tensor.rows() || e->cols != p.tensor.cols())
            throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
        p.tensor.impl->v = e->values;
    }
}

void optimizer_to_checkpoint(const Optimizer& opt, const ParamStore& store,
                             Checkpoint& c) {
    auto& m = const_cast<Optimizer&>(opt).moment1();
    auto& v = const_cast<Optimizer&>(opt).moment2();
    const auto& ps = store.params();
    for (size_t i = 0; i < ps.size(); ++i) {
        c.entries.push_back({"opt/m/" + ps[i].name, 1,
                             static_cast<int>(m[i].size()), m[i]});
        c.entries.push_back({"opt/v/" + ps[i].name, 1,
                             static_cast<int>(v[i].size()), v[i]});
    }
    c.meta.step_count = opt.step_count();
}

void checkpoint_to_optimizer(const Checkpoint& c, const ParamStore& store,
                             Optimizer& opt) {
    const auto& ps = store.params();
    for (size_t i = 0; i < ps.size(); ++i) {
        const CkptEntry* m = c.find("opt/m/" + ps[i].name);
        const CkptEntry* v = c.find("opt/v/" + ps[i].name);
        if (!m || !v)
            throw std::runtime_error("checkpoint: missing moments for " + ps[i].name);
        opt.moment1()[i] = m->values;
        opt.moment2()[i] = v->values;
    }
    opt.set_step_count(c.meta.step_count);
}

void add_codebook(Checkpoint& c, const std::string& key, const Codebook& cb) {
    c.entries.push_back({key + "/vectors", cb.K, cb.P, cb.vectors});
    if (!cb.projection.empty())
        c.entries.push_back({key + "/projection", cb.D, cb.P, cb.projection});
    float kind = cb.kind == "kmeans" ? 1.0f : 0.0f;
    c.entries.push_back({key + "/info", 1, 4,
                         {kind, static_cast<float>(cb.source_layer), cb.inertia,
                          static_cast<float>(cb.D)}});
}

Codebook get_codebook(const Checkpoint& c, const std::string& key) {
    const CkptEntry* vec = c.find(key + "/vectors");
    const CkptEntry* info = c.find(key + "/info");
    if (!vec || !info) throw std::runtime_error("checkpoint: missing codebook " + key);
    Codebook cb;
    cb.K = vec->rows;
    cb.P = vec->cols;
    cb.vectors = vec->values;
    cb.kind = info->values[0] == 1.0f ? "kmeans" : "random_projection";
    cb.source_layer = static_cast<int>(info->values[1]);
    cb.inertia = info->values[2];
    cb.D = static_cast<int>(info->values[3]);
    if (const CkptEntry* proj = c.find(key + "/projection"))
        cb.projection = proj->values;
    return cb;
}

}  // namespace acllm
