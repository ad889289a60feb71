#include "flam/io_util.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "flam/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint files are little-endian; big-endian hosts unsupported");

namespace flam::io {

namespace {

template <typename T>
void append_le(std::string& out, T v) {
    char tmp[sizeof(T)];
    std::memcpy(tmp, &v, sizeof(T));
    out.append(tmp, sizeof(T));
}

}  // namespace

void append_u32(std::string& out, std::uint32_t v) { append_le(out, v); }
void append_u64(std::string& out, std::uint64_t v) { append_le(out, v); }
void append_f32(std::string& out, float v) { append_le(out, v); }

void append_string(std::string& out, const std::string& s) {
    append_u32(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

void append_tensor_f32(std::string& out, const ag::Tensor& t) {
    append_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        append_u32(out, static_cast<std::uint32_t>(d));
    }
    for (double v : t.data()) append_f32(out, static_cast<float>(v));
}

Reader::Reader(std::vector<char> buf, std::string name)
    : buf_(std::move(buf)), name_(std::move(name)) {}

void Reader::fail(const std::string& what) const {
    throw DataError(name_ + ": " + what + " at offset " + std::to_string(pos_));
}

void Reader::need(std::size_t bytes) const {
    if (pos_ + bytes > buf_.size()) {
        fail("truncated (need " + std::to_string(bytes) + " bytes, have " +
             std::to_string(buf_.size() - pos_) + ")");
    }
}

std::uint32_t Reader::u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, buf_.data() + pos_, 4);
    pos_ += 4;
    return v;
}

std::uint64_t Reader::u64() {
    need(8);
    std::uint64_t v;
    std::memcpy(&v, buf_.data() + pos_, 8);
    pos_ += 8;
    return v;
}

float Reader::f32() {
    need(4);
    float v;
    std::memcpy(&v, buf_.data() + pos_, 4);
    pos_ += 4;
    return v;
}

std::string Reader::str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(buf_.data() + pos_, len);
    pos_ += len;
    return s;
}

ag::Tensor Reader::tensor_f32() {
    const std::uint32_t rank = u32();
    if (rank > 2) fail("tensor rank " + std::to_string(rank) + " unsupported");
    std::vector<std::size_t> shape(rank);
    std::size_t total = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = u32();
        total *= shape[i];
    }
    need(4 * total);
    ag::Tensor t(shape);
    for (std::size_t i = 0; i < total; ++i) {
        t.data()[i] = static_cast<double>(f32());
    }
    return t;
}

void Reader::expect_magic(const char* magic, std::size_t len) {
    need(len);
    if (std::memcmp(buf_.data() + pos_, magic, len) != 0) fail("bad magic");
    pos_ += len;
}

void Reader::expect_end() const {
    if (pos_ != buf_.size()) {
        throw DataError(name_ + ": " + std::to_string(buf_.size() - pos_) +
                        " trailing bytes at offset " + std::to_string(pos_));
    }
}

std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream fs(path, std::ios::binary);
    if (!fs) throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(fs), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream fs(path, std::ios::binary | std::ios::trunc);
    if (!fs) throw DataError("cannot open " + path.string() + " for writing");
    fs.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!fs) throw DataError("write failed for " + path.string());
}

std::string sha256_hex(const void* data, std::size_t len) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int digest_len = 0;
    if (EVP_Digest(data, len, digest, &digest_len, EVP_sha256(), nullptr) != 1) {
        throw DataError("sha256 computation failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * digest_len);
    for (unsigned int i = 0; i < digest_len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) {
    const std::vector<char> buf = read_file(path);
    return sha256_hex(buf.data(), buf.size());
}

}  // namespace flam::io
