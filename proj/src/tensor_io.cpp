#include "psteer/tensor_io.hpp"

#include "psteer/audit.hpp"

#include <cstring>
#include <fstream>

namespace psteer {

namespace {

constexpr char kMagic[4] = {'P', '2', 'A', 'F'};
constexpr std::uint16_t kVersion = 1;

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xFF));
    out.push_back(static_cast<unsigned char>(v >> 8));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
    }
}

void put_f64(std::vector<unsigned char>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
    }
}

class Reader {
public:
    explicit Reader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) {
            bits |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 8;
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    void expect_magic() {
        need(4);
        if (std::memcmp(bytes_.data() + pos_, kMagic, 4) != 0) {
            throw ParseError("feature file: bad magic");
        }
        pos_ += 4;
    }

    bool exhausted() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) {
            throw ParseError("feature file: truncated");
        }
    }

    const std::vector<unsigned char>& bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<unsigned char> encode_feature(const Tensor& t) {
    std::vector<unsigned char> out;
    out.reserve(8 + 4 * t.rank() + 8 * t.size());
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u16(out, kVersion);
    put_u16(out, static_cast<std::uint16_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        put_u32(out, static_cast<std::uint32_t>(d));
    }
    for (double v : t.data()) {
        put_f64(out, v);
    }
    return out;
}

Tensor decode_feature(const std::vector<unsigned char>& bytes) {
    Reader r(bytes);
    r.expect_magic();
    if (r.u16() != kVersion) {
        throw ParseError("feature file: unsupported version");
    }
    const std::uint16_t rank = r.u16();
    std::vector<std::size_t> shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
        d = r.u32();
        count *= d;
    }
    std::vector<double> data(count);
    for (double& v : data) {
        v = r.f64();
    }
    if (!r.exhausted()) {
        throw ParseError("feature file: trailing bytes");
    }
    return Tensor(std::move(shape), std::move(data));
}

void write_feature_file(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = encode_feature(t);
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open for write: " + path.string());
    }
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) {
        throw IoError("write failed: " + path.string());
    }
}

Tensor read_feature_file(const std::filesystem::path& path) {
    audit::record_file_open(path.string());
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open: " + path.string());
    }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
    return decode_feature(bytes);
}

} // namespace psteer
