#include "refface/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include "refface/errors.hpp"

namespace refface {

namespace {

constexpr char kMagic[8] = {'R', 'F', 'F', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::string& buf, T v) {
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_str(std::string& buf, const std::string& s) {
    put<uint32_t>(buf, static_cast<uint32_t>(s.size()));
    buf.append(s);
}

struct Reader {
    const char* p;
    const char* end;
    template <typename T>
    T get() {
        if (p + sizeof(T) > end) throw IoError("checkpoint: truncated");
        T v;
        std::memcpy(&v, p, sizeof(T));
        p += sizeof(T);
        return v;
    }
    std::string get_str() {
        uint32_t n = get<uint32_t>();
        if (p + n > end) throw IoError("checkpoint: truncated string");
        std::string s(p, p + n);
        p += n;
        return s;
    }
};

}  // namespace

int64_t Checkpoint::meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw IoError("checkpoint meta missing key: " + key);
    return it->second;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string payload;
    put<uint32_t>(payload, static_cast<uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
        put_str(payload, k);
        put<int64_t>(payload, v);
    }
    put<uint32_t>(payload, static_cast<uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        put_str(payload, name);
        put<uint32_t>(payload, static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) put<int64_t>(payload, d);
        payload.append(reinterpret_cast<const char*>(t.data.data()),
                       t.data.size() * sizeof(double));
    }
    const uint64_t h = fnv1a64(payload.data(), payload.size());

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint: " + path);
    f.write(kMagic, sizeof(kMagic));
    f.write(reinterpret_cast<const char*>(&ckpt.kind), sizeof(ckpt.kind));
    f.write(reinterpret_cast<const char*>(&ckpt.seed), sizeof(ckpt.seed));
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    f.write(reinterpret_cast<const char*>(&h), sizeof(h));
    if (!f) throw IoError("short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path, uint32_t expected_kind) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError(path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof(kMagic) + 4 + 8 + 8 ||
        std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
        throw IoError("not a checkpoint file: " + path);

    Checkpoint ckpt;
    Reader r{bytes.data() + sizeof(kMagic), bytes.data() + bytes.size()};
    ckpt.kind = r.get<uint32_t>();
    ckpt.seed = r.get<uint64_t>();
    const char* payload_begin = r.p;
    const char* payload_end = bytes.data() + bytes.size() - sizeof(uint64_t);

    uint64_t stored_hash;
    std::memcpy(&stored_hash, payload_end, sizeof(stored_hash));
    const uint64_t actual =
        fnv1a64(payload_begin, static_cast<size_t>(payload_end - payload_begin));
    if (stored_hash != actual) throw IoError("checkpoint hash mismatch: " + path);

    r.end = payload_end;
    const uint32_t n_meta = r.get<uint32_t>();
    for (uint32_t i = 0; i < n_meta; i++) {
        std::string k = r.get_str();
        ckpt.meta[k] = r.get<int64_t>();
    }
    const uint32_t n_tensors = r.get<uint32_t>();
    for (uint32_t i = 0; i < n_tensors; i++) {
        std::string name = r.get_str();
        const uint32_t ndim = r.get<uint32_t>();
        std::vector<int64_t> shape(ndim);
        for (uint32_t d = 0; d < ndim; d++) shape[d] = r.get<int64_t>();
        Tensor t(shape);
        const size_t nbytes = t.data.size() * sizeof(double);
        if (r.p + nbytes > r.end) throw IoError("checkpoint: truncated tensor " + name);
        std::memcpy(t.data.data(), r.p, nbytes);
        r.p += nbytes;
        ckpt.tensors[name] = std::move(t);
    }
    if (expected_kind != 0 && ckpt.kind != expected_kind)
        throw IoError("checkpoint kind mismatch for " + path);
    return ckpt;
}

uint64_t file_fnv1a(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError(path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace refface
