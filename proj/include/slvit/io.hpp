#pragma once

// On-disk formats. Everything we write is little-endian; IDX input is
// big-endian as that format demands. Files are written to a temp sibling
// and renamed into place so readers never see partial output.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "slvit/param_set.hpp"
#include "slvit/tensor.hpp"

namespace slvit {

static_assert(std::endian::native == std::endian::little, "payload copies assume a little-endian host");

using Json = nlohmann::json;

class IoError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::u8: return 1;
    }
    throw IoError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

inline DType dtype_from_code(std::uint8_t c) {
    if (c > 2) throw IoError("unknown dtype code " + std::to_string(c));
    return static_cast<DType>(c);
}

// Untyped array as stored on disk.
struct RawTensor {
    DType dtype = DType::f32;
    Shape shape;
    std::vector<unsigned char> bytes;

    std::size_t numel() const { return slvit::numel(shape); }

    template <typename T>
    static RawTensor from(const Tensor<T>& t) {
        RawTensor r{dtype_of<T>(), t.shape(), {}};
        r.bytes.resize(t.size() * sizeof(T));
        if (!r.bytes.empty()) std::memcpy(r.bytes.data(), t.data().data(), r.bytes.size());
        return r;
    }

    template <typename V>
    static RawTensor from_values(Shape shape, const std::vector<V>& v) {
        if (slvit::numel(shape) != v.size()) throw ShapeError("RawTensor: value count does not match shape");
        RawTensor r{dtype_of<V>(), std::move(shape), {}};
        r.bytes.resize(v.size() * sizeof(V));
        if (!r.bytes.empty()) std::memcpy(r.bytes.data(), v.data(), r.bytes.size());
        return r;
    }

    // Element i converted to double, whatever the stored type.
    double at(std::size_t i) const {
        switch (dtype) {
            case DType::f32: {
                float f;
                std::memcpy(&f, bytes.data() + 4 * i, 4);
                return f;
            }
            case DType::f64: {
                double d;
                std::memcpy(&d, bytes.data() + 8 * i, 8);
                return d;
            }
            case DType::u8: return bytes[i];
        }
        return 0;
    }

    // Same-type loads copy the bytes; other types convert through double.
    template <typename T>
    Tensor<T> to_tensor() const {
        std::vector<T> data(numel());
        if (dtype == dtype_of<T>()) {
            if (!bytes.empty()) std::memcpy(data.data(), bytes.data(), bytes.size());
        } else {
            for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(at(i));
        }
        return Tensor<T>(shape, std::move(data));
    }
};

// ------------------------------------------------------------ byte helpers

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
   public:
    Reader(const std::string& bytes, std::string what) : s_(bytes), what_(std::move(what)) {}

    const unsigned char* take(std::size_t n) {
        if (n > s_.size() - pos_) throw IoError(what_ + ": truncated file");
        const auto* p = reinterpret_cast<const unsigned char*>(s_.data() + pos_);
        pos_ += n;
        return p;
    }
    std::uint8_t u8() { return *take(1); }
    std::uint32_t u32_le() {
        const unsigned char* p = take(4);
        return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }
    std::uint32_t u32_be() {
        const unsigned char* p = take(4);
        return (static_cast<std::uint32_t>(p[0]) << 24) | (p[1] << 16) | (p[2] << 8) | p[3];
    }
    std::string str(std::size_t n) {
        const unsigned char* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }
    bool done() const { return pos_ == s_.size(); }

   private:
    const std::string& s_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline void put_tensor(std::string& out, const RawTensor& t) {
    if (t.shape.size() > 255) throw IoError("tensor rank above 255");
    out.push_back(static_cast<char>(t.dtype));
    out.push_back(static_cast<char>(t.shape.size()));
    for (std::size_t d : t.shape) {
        if (d > 0xffffffffULL) throw IoError("tensor dimension does not fit in u32");
        put_u32(out, static_cast<std::uint32_t>(d));
    }
    if (t.bytes.size() != t.numel() * dtype_size(t.dtype)) throw IoError("tensor payload size mismatch");
    out.append(reinterpret_cast<const char*>(t.bytes.data()), t.bytes.size());
}

inline RawTensor get_tensor(Reader& r) {
    RawTensor t;
    t.dtype = dtype_from_code(r.u8());
    const std::size_t rank = r.u8();
    for (std::size_t i = 0; i < rank; ++i) t.shape.push_back(r.u32_le());
    const std::size_t n = t.numel() * dtype_size(t.dtype);
    const unsigned char* p = r.take(n);
    t.bytes.assign(p, p + n);
    return t;
}

}  // namespace detail

// ------------------------------------------------------------ files

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline constexpr char kTensorMagic[4] = {'S', 'L', 'V', 'T'};

inline std::string encode_tensor(const RawTensor& t) {
    std::string out(kTensorMagic, 4);
    detail::put_tensor(out, t);
    return out;
}

inline RawTensor decode_tensor(const std::string& bytes, const std::string& what = "tensor") {
    detail::Reader r(bytes, what);
    if (r.str(4) != std::string(kTensorMagic, 4)) throw IoError(what + ": bad magic, expected SLVT");
    RawTensor t = detail::get_tensor(r);
    if (!r.done()) throw IoError(what + ": trailing bytes after payload");
    return t;
}

inline void save_tensor(const std::filesystem::path& path, const RawTensor& t) {
    write_file_atomic(path, encode_tensor(t));
}

inline RawTensor load_tensor(const std::filesystem::path& path) {
    return decode_tensor(read_file(path), path.string());
}

// IDX: two zero bytes, a type byte, a rank byte, rank big-endian u32 dims,
// then the payload. Only unsigned-byte data (type 0x08) is accepted.
inline RawTensor decode_idx(const std::string& bytes, const std::string& what = "idx") {
    detail::Reader r(bytes, what);
    const std::uint32_t magic = r.u32_be();
    if (magic != 0x801 && magic != 0x803) {
        std::ostringstream m;
        m << what << ": unsupported IDX magic 0x" << std::hex << magic;
        throw IoError(m.str());
    }
    RawTensor t;
    t.dtype = DType::u8;
    for (std::uint32_t i = 0; i < (magic & 0xff); ++i) t.shape.push_back(r.u32_be());
    const unsigned char* p = r.take(t.numel());
    t.bytes.assign(p, p + t.numel());
    if (!r.done()) throw IoError(what + ": trailing bytes after payload");
    return t;
}

inline RawTensor load_idx(const std::filesystem::path& path) { return decode_idx(read_file(path), path.string()); }

// ------------------------------------------------------------ checkpoints

inline constexpr char kCheckpointMagic[4] = {'S', 'L', 'V', 'X'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    Json meta = Json::object();  // must carry config_hash and seed
    std::vector<std::pair<std::string, RawTensor>> tensors;

    const RawTensor& at(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return t;
        }
        throw IoError("checkpoint has no tensor '" + name + "'");
    }
};

inline std::string encode_checkpoint(const Checkpoint& c) {
    if (!c.meta.contains("config_hash") || !c.meta.contains("seed")) {
        throw IoError("checkpoint metadata needs config_hash and seed");
    }
    std::string out(kCheckpointMagic, 4);
    detail::put_u32(out, kCheckpointVersion);
    const std::string meta = c.meta.dump();
    detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
    out += meta;
    detail::put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_tensor(out, t);
    }
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint") {
    detail::Reader r(bytes, what);
    if (r.str(4) != std::string(kCheckpointMagic, 4)) throw IoError(what + ": bad magic, expected SLVX");
    const std::uint32_t version = r.u32_le();
    if (version != kCheckpointVersion) {
        throw IoError(what + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint c;
    try {
        c.meta = Json::parse(r.str(r.u32_le()));
    } catch (const Json::parse_error& e) {
        throw IoError(what + ": corrupt metadata block");
    }
    const std::uint32_t n = r.u32_le();
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = r.str(r.u32_le());
        c.tensors.emplace_back(std::move(name), detail::get_tensor(r));
    }
    if (!r.done()) throw IoError(what + ": trailing bytes after tensor table");
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path), path.string());
}

// Parameter sets go in as one tensor per path; buffer paths are listed in
// the metadata so they come back as buffers.
template <typename T>
void put_params(Checkpoint& c, const std::string& prefix, const ParamSet<T>& params) {
    Json buffers = Json::array();
    for (const auto& [path, e] : params.entries()) {
        c.tensors.emplace_back(prefix + path, RawTensor::from(e.value));
        if (e.buffer) buffers.push_back(path);
    }
    c.meta["buffers:" + prefix] = buffers;
}

template <typename T>
ParamSet<T> get_params(const Checkpoint& c, const std::string& prefix, bool trainable) {
    const auto key = "buffers:" + prefix;
    if (!c.meta.contains(key)) throw IoError("checkpoint has no parameter group '" + prefix + "'");
    const auto& buffers = c.meta.at(key);
    ParamSet<T> p;
    for (const auto& [name, t] : c.tensors) {
        if (name.rfind(prefix, 0) != 0) continue;
        const std::string path = name.substr(prefix.size());
        if (std::find(buffers.begin(), buffers.end(), path) != buffers.end()) {
            p.add_buffer(path, t.template to_tensor<T>());
        } else {
            p.add(path, t.template to_tensor<T>(), trainable);
        }
    }
    return p;
}

// Verifies a checkpoint belongs to this run before anything is reused.
inline void check_provenance(const Checkpoint& c, const std::string& config_hash, std::uint64_t seed,
                             const std::string& what) {
    const std::string got = c.meta.value("config_hash", std::string{});
    if (got != config_hash) {
        throw IoError(what + ": config hash mismatch (checkpoint " + got + ", config " + config_hash + ")");
    }
    if (c.meta.value("seed", std::uint64_t{0}) != seed) {
        throw IoError(what + ": seed mismatch (checkpoint " + c.meta["seed"].dump() + ", requested " +
                      std::to_string(seed) + ")");
    }
}

// ------------------------------------------------------------ results

inline std::string to_jsonl(const std::vector<Json>& records) {
    std::string out;
    for (const auto& r : records) out += r.dump() + "\n";
    return out;
}

inline std::vector<Json> read_jsonl(const std::filesystem::path& path) {
    std::vector<Json> out;
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(Json::parse(line));
    }
    return out;
}

}  // namespace slvit
