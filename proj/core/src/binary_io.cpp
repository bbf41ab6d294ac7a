#include "unlearn/binary_io.hpp"

#include "unlearn/errors.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace unlearn::io {

namespace {

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        std::reverse(b, b + sizeof(T));
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

std::string read_bytes(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + file.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_bytes(const std::filesystem::path& file, const void* data, std::size_t n) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

std::string digest_hex(const void* data, std::size_t n) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), data, n) != 1 || EVP_DigestFinal_ex(ctx.get(), md, &len) != 1)
        throw std::runtime_error("sha256 failed");
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int{md[i]};
    return hex.str();
}

} // namespace

void write_f32(const std::filesystem::path& file, std::span<const real> values) {
    std::vector<float> buf(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) buf[i] = to_little(static_cast<float>(values[i]));
    write_bytes(file, buf.data(), buf.size() * sizeof(float));
}

std::vector<real> read_f32(const std::filesystem::path& file) {
    const std::string bytes = read_bytes(file);
    if (bytes.size() % sizeof(float)) throw ArgumentError(file.string() + ": size is not a multiple of 4");
    std::vector<real> out(bytes.size() / sizeof(float));
    for (std::size_t i = 0; i < out.size(); ++i) {
        float f;
        std::memcpy(&f, bytes.data() + i * sizeof(float), sizeof(float));
        out[i] = to_little(f);
    }
    return out;
}

void write_u32(const std::filesystem::path& file, std::span<const int> values) {
    std::vector<std::uint32_t> buf(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) buf[i] = to_little(static_cast<std::uint32_t>(values[i]));
    write_bytes(file, buf.data(), buf.size() * sizeof(std::uint32_t));
}

std::vector<int> read_u32(const std::filesystem::path& file) {
    const std::string bytes = read_bytes(file);
    if (bytes.size() % 4) throw ArgumentError(file.string() + ": size is not a multiple of 4");
    std::vector<int> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t u;
        std::memcpy(&u, bytes.data() + i * 4, 4);
        out[i] = static_cast<int>(to_little(u));
    }
    return out;
}

void write_text(const std::filesystem::path& file, const std::string& text) {
    write_bytes(file, text.data(), text.size());
}

std::string read_text(const std::filesystem::path& file) { return read_bytes(file); }

std::string sha256_file(const std::filesystem::path& file) {
    const std::string bytes = read_bytes(file);
    return digest_hex(bytes.data(), bytes.size());
}

std::string sha256_text(const std::string& text) { return digest_hex(text.data(), text.size()); }

real to_f32(real v) { return static_cast<real>(static_cast<float>(v)); }

} // namespace unlearn::io
