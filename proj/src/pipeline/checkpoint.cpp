// SPDX-License-Identifier: Apache-2.0

#include "tape/pipeline/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tape/numeric/errors.hpp"

namespace tape::pipeline {

namespace {

constexpr char kMagic[8] = {'T', 'A', 'P', 'E', 'C', 'K', 'P', 'T'};

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }

    std::span<const std::uint8_t> take(std::uint64_t n) {
        need(n);
        auto s = bytes_.subspan(pos_, static_cast<std::size_t>(n));
        pos_ += static_cast<std::size_t>(n);
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::uint64_t n) const {
        if (n > bytes_.size() - pos_) throw FormatError("TAPECKPT: truncated at byte " + std::to_string(pos_));
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamStore& params) {
    std::vector<std::uint8_t> out;
    for (char c : kMagic) out.push_back(static_cast<std::uint8_t>(c));
    put_le(out, kCheckpointVersion);
    put_le(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& e : params.entries()) {
        put_le(out, static_cast<std::uint32_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.push_back(static_cast<std::uint8_t>(e.role));
        out.push_back(0);  // float32
        put_le(out, static_cast<std::uint32_t>(e.tensor.rank()));
        for (auto d : e.tensor.shape()) put_le(out, static_cast<std::uint64_t>(d));
        for (float v : e.tensor.data()) put_le(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

ParamStore decode_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    const auto magic = r.take(8);
    if (std::memcmp(magic.data(), kMagic, 8) != 0) throw FormatError("TAPECKPT: bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw FormatError("TAPECKPT: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    const auto count = r.get<std::uint32_t>();
    ParamStore params;
    for (std::uint32_t t = 0; t < count; ++t) {
        const auto name_len = r.get<std::uint32_t>();
        const auto name_bytes = r.take(name_len);
        std::string name(name_bytes.begin(), name_bytes.end());
        const auto role = role_from_code(r.get<std::uint8_t>());
        const auto dtype = r.get<std::uint8_t>();
        if (dtype != 0) throw FormatError("TAPECKPT: tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw FormatError("TAPECKPT: tensor '" + name + "' has implausible rank " + std::to_string(rank));
        Shape shape;
        std::uint64_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const auto d = r.get<std::uint64_t>();
            if (d == 0 || d > (std::uint64_t{1} << 40)) throw FormatError("TAPECKPT: tensor '" + name + "' has a bad dimension");
            numel *= d;
            if (numel > (std::uint64_t{1} << 40)) throw FormatError("TAPECKPT: tensor '" + name + "' is too large");
            shape.push_back(static_cast<std::int64_t>(d));
        }
        const auto raw = r.take(numel * 4);
        std::vector<float> data(static_cast<std::size_t>(numel));
        for (std::size_t i = 0; i < data.size(); ++i) {
            std::uint32_t u = 0;
            for (std::size_t b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(raw[i * 4 + b]) << (8 * b);
            data[i] = std::bit_cast<float>(u);
        }
        try {
            params.add(std::move(name), role, Tensor(std::move(shape), std::move(data)));
        } catch (const ConfigError& e) {
            throw FormatError(std::string("TAPECKPT: ") + e.what());
        }
    }
    if (!r.done()) throw FormatError("TAPECKPT: trailing bytes after last tensor");
    return params;
}

void save_checkpoint(const ParamStore& params, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(params);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint not found: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::vector<std::string> changed_tensors(const ParamStore& a, const ParamStore& b) {
    std::vector<std::string> out;
    for (const auto& e : a.entries()) {
        if (!b.contains(e.name)) {
            out.push_back(e.name);
            continue;
        }
        const auto& other = b.get(e.name);
        const auto x = e.tensor.data();
        const auto y = other.data();
        if (e.tensor.shape() != other.shape() || std::memcmp(x.data(), y.data(), x.size_bytes()) != 0)
            out.push_back(e.name);
    }
    for (const auto& e : b.entries())
        if (!a.contains(e.name)) out.push_back(e.name);
    return out;
}

}  // namespace tape::pipeline
