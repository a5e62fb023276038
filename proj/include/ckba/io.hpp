#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <Eigen/Core>

#include "ckba/error.hpp"

namespace ckba::io {

/// Binary matrix file layout (all little-endian):
///   "CKBA" | u32 version | u64 rows | u64 cols | rows*cols f64, row-major
inline constexpr char kMatrixMagic[4] = {'C', 'K', 'B', 'A'};
inline constexpr std::uint32_t kMatrixVersion = 1;
inline constexpr std::size_t kMatrixHeaderBytes = 24;

class MatrixFormatError : public ValidationError {
public:
    enum class Kind { bad_magic, bad_version, truncated, io };
    MatrixFormatError(Kind kind, const std::string& what) : ValidationError(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Throws ValidationError on non-finite entries.
void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix(const std::filesystem::path& path);

/// Writes to a temporary sibling and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace ckba::io
