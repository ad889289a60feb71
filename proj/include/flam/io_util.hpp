#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flam/tensor.hpp"

namespace flam::io {

void append_u32(std::string& out, std::uint32_t v);
void append_u64(std::string& out, std::uint64_t v);
void append_f32(std::string& out, float v);
// u32 length prefix + raw bytes
void append_string(std::string& out, const std::string& s);
// shape rank + dims as u32, then values as little-endian f32
void append_tensor_f32(std::string& out, const ag::Tensor& t);

// Bounds-checked little-endian reads over a loaded file; failures raise
// DataError carrying the byte offset and file name.
class Reader {
public:
    Reader(std::vector<char> buf, std::string name);

    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    std::string str();
    ag::Tensor tensor_f32();
    void expect_magic(const char* magic, std::size_t len);
    void expect_end() const;
    std::size_t offset() const { return pos_; }
    [[noreturn]] void fail(const std::string& what) const;

private:
    void need(std::size_t bytes) const;

    std::vector<char> buf_;
    std::string name_;
    std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace flam::io
