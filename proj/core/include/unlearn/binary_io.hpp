#pragma once

#include "unlearn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

// Little-endian scalar files and small helpers shared by the artifact writers.
namespace unlearn::io {

void write_f32(const std::filesystem::path& file, std::span<const real> values);
std::vector<real> read_f32(const std::filesystem::path& file);
void write_u32(const std::filesystem::path& file, std::span<const int> values);
std::vector<int> read_u32(const std::filesystem::path& file);

void write_text(const std::filesystem::path& file, const std::string& text);
std::string read_text(const std::filesystem::path& file);

// Hex SHA-256 of a file's bytes / of a string.
std::string sha256_file(const std::filesystem::path& file);
std::string sha256_text(const std::string& text);

// Rounds through float32, matching what a checkpoint round-trip stores.
real to_f32(real v);

} // namespace unlearn::io
