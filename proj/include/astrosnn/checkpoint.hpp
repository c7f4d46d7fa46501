#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "astrosnn/model.hpp"

namespace astrosnn {

// Checkpoint file layout (little-endian throughout):
//   magic "ASNN" | u32 version=1 | u64 blob_len | JSON blob (config + step)
//   | u32 tensor_count | per tensor: u16 name_len, name, u8 dtype tag
//   (0=f32, 1=f64), u8 rank, u64 dims[rank], raw values.

namespace detail {

constexpr char kMagic[4] = {'A', 'S', 'N', 'N'};
constexpr uint32_t kVersion = 1;

template <typename T>
uint8_t dtype_tag() {
    return std::is_same_v<T, float> ? 0 : 1;
}

struct ByteWriter {
    std::string buf;
    void raw(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
    template <typename U>
    void scalar(U v) { raw(&v, sizeof(U)); }
};

struct ByteReader {
    const std::string& buf;
    size_t pos = 0;
    std::string section = "header";

    explicit ByteReader(const std::string& b) : buf(b) {}

    void expect(size_t n) {
        if (pos + n > buf.size())
            throw IoError("checkpoint truncated in " + section + " (need " + std::to_string(n) +
                          " bytes at offset " + std::to_string(pos) + ")");
    }
    void raw(void* p, size_t n) {
        expect(n);
        std::memcpy(p, buf.data() + pos, n);
        pos += n;
    }
    template <typename U>
    U scalar() {
        U v;
        raw(&v, sizeof(U));
        return v;
    }
    std::string bytes(size_t n) {
        expect(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

template <typename T>
void write_tensor(ByteWriter& w, const std::string& name, const Tensor<T>& t) {
    if (name.size() > 0xffff) throw ContractError("tensor name too long for checkpoint");
    w.scalar<uint16_t>(static_cast<uint16_t>(name.size()));
    w.raw(name.data(), name.size());
    w.scalar<uint8_t>(dtype_tag<T>());
    w.scalar<uint8_t>(static_cast<uint8_t>(t.rank()));
    for (int64_t d : t.shape()) w.scalar<uint64_t>(static_cast<uint64_t>(d));
    w.raw(t.data(), static_cast<size_t>(t.size()) * sizeof(T));
}

}  // namespace detail

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path, int64_t train_step = 0,
                     const std::vector<std::pair<std::string, const Tensor<T>*>>& extra = {}) {
    detail::ByteWriter w;
    w.raw(detail::kMagic, 4);
    w.scalar<uint32_t>(detail::kVersion);

    nlohmann::json blob = model.cfg.to_json();
    blob["train_step"] = train_step;
    std::string blob_str = blob.dump();
    w.scalar<uint64_t>(blob_str.size());
    w.raw(blob_str.data(), blob_str.size());

    auto params = model.named_params();
    w.scalar<uint32_t>(static_cast<uint32_t>(params.size() + extra.size()));
    for (auto& [name, t] : params) detail::write_tensor(w, name, *t);
    for (auto& [name, t] : extra) detail::write_tensor(w, name, *t);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
    if (!f) throw IoError("short write to checkpoint: " + path);
}

namespace detail {

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return data;
}

// Reads and validates everything up to and including the JSON blob.
inline nlohmann::json read_header(ByteReader& r) {
    r.section = "magic";
    std::string magic = r.bytes(4);
    if (std::memcmp(magic.data(), kMagic, 4) != 0)
        throw IoError("bad checkpoint magic (not an ASNN checkpoint)");
    r.section = "version";
    uint32_t version = r.scalar<uint32_t>();
    if (version != kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) +
                      " (this build reads version " + std::to_string(kVersion) + ")");
    r.section = "config";
    uint64_t blob_len = r.scalar<uint64_t>();
    std::string blob = r.bytes(static_cast<size_t>(blob_len));
    nlohmann::json j = nlohmann::json::parse(blob, nullptr, false);
    if (j.is_discarded()) throw IoError("checkpoint config blob is not valid JSON");
    return j;
}

}  // namespace detail

// Reads only the config, for dtype dispatch before a typed load.
inline ModelConfig peek_checkpoint_config(const std::string& path) {
    std::string data = detail::read_file_bytes(path);
    detail::ByteReader r(data);
    return ModelConfig::from_json(detail::read_header(r));
}

template <typename T>
struct LoadedCheckpoint {
    Model<T> model;
    int64_t train_step = 0;
    std::vector<std::pair<std::string, Tensor<T>>> extra;  // optimizer moments etc.

    const Tensor<T>* find_extra(const std::string& name) const {
        for (auto& [n, t] : extra)
            if (n == name) return &t;
        return nullptr;
    }
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    std::string data = detail::read_file_bytes(path);
    detail::ByteReader r(data);
    nlohmann::json blob = detail::read_header(r);

    LoadedCheckpoint<T> out{Model<T>::build(ModelConfig::from_json(blob)),
                            blob.value("train_step", int64_t{0}),
                            {}};

    r.section = "tensor table";
    uint32_t count = r.scalar<uint32_t>();

    std::vector<std::pair<std::string, Tensor<T>>> table;
    for (uint32_t i = 0; i < count; ++i) {
        r.section = "tensor table entry " + std::to_string(i);
        uint16_t name_len = r.scalar<uint16_t>();
        std::string name = r.bytes(name_len);
        r.section = "tensor '" + name + "'";
        uint8_t tag = r.scalar<uint8_t>();
        if (tag != detail::dtype_tag<T>())
            throw IoError("tensor '" + name + "' has dtype tag " + std::to_string(tag) +
                          " but the checkpoint config promises " + dtype_name<T>());
        uint8_t rank = r.scalar<uint8_t>();
        if (rank < 1 || rank > 2)
            throw IoError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
        Shape shape;
        int64_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            auto dim = static_cast<int64_t>(r.scalar<uint64_t>());
            if (dim < 1 || dim > (int64_t{1} << 32))
                throw IoError("tensor '" + name + "' has implausible dimension " +
                              std::to_string(dim));
            shape.push_back(dim);
            numel *= dim;
        }
        std::vector<T> values(static_cast<size_t>(numel));
        r.raw(values.data(), static_cast<size_t>(numel) * sizeof(T));
        table.emplace_back(name, Tensor<T>::from(shape, std::move(values)));
    }
    if (r.pos != data.size())
        throw IoError("checkpoint has " + std::to_string(data.size() - r.pos) +
                      " trailing bytes after the tensor table");

    for (auto& [name, param] : out.model.named_params()) {
        bool found = false;
        for (auto& [tname, t] : table) {
            if (tname != name) continue;
            if (t.shape() != param->shape())
                throw IoError("tensor '" + name + "' has shape " + shape_str(t.shape()) +
                              " but the config implies " + shape_str(param->shape()));
            param->values() = t.values();
            found = true;
            break;
        }
        if (!found) throw IoError("checkpoint is missing tensor '" + name + "'");
    }
    for (auto& [name, t] : table) {
        bool is_param = false;
        for (auto& [pname, p] : out.model.named_params())
            if (pname == name) { is_param = true; break; }
        if (!is_param) out.extra.emplace_back(name, std::move(t));
    }
    return out;
}

}  // namespace astrosnn
