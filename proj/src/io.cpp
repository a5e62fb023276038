#include "ckba/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

#include <openssl/evp.h>

namespace ckba::io {
namespace {

template <class T>
void put_le(std::string& out, T value) {
    std::array<unsigned char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    out.append(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <class T>
T get_le(const char* p) {
    std::array<unsigned char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

}  // namespace

void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
    if (!m.allFinite())
        throw ValidationError("refusing to write non-finite matrix to " + path.string());
    std::string out;
    out.reserve(kMatrixHeaderBytes + sizeof(double) * static_cast<std::size_t>(m.size()));
    out.append(kMatrixMagic, 4);
    put_le<std::uint32_t>(out, kMatrixVersion);
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) put_le<double>(out, m(i, j));
    write_file_atomic(path, out);
}

Eigen::MatrixXd read_matrix(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    using K = MatrixFormatError::Kind;
    if (bytes.size() < 4) throw MatrixFormatError(K::truncated, "truncated header: " + path.string());
    if (std::memcmp(bytes.data(), kMatrixMagic, 4) != 0)
        throw MatrixFormatError(K::bad_magic, "bad magic in " + path.string());
    if (bytes.size() < kMatrixHeaderBytes)
        throw MatrixFormatError(K::truncated, "truncated header: " + path.string());
    const auto version = get_le<std::uint32_t>(bytes.data() + 4);
    if (version != kMatrixVersion)
        throw MatrixFormatError(K::bad_version,
                                "unsupported version " + std::to_string(version) + " in " + path.string());
    const auto rows = get_le<std::uint64_t>(bytes.data() + 8);
    const auto cols = get_le<std::uint64_t>(bytes.data() + 16);
    const std::uint64_t payload = bytes.size() - kMatrixHeaderBytes;
    if (cols != 0 && rows > payload / sizeof(double) / cols)
        throw MatrixFormatError(K::truncated, "truncated payload: " + path.string());
    if (rows * cols * sizeof(double) != payload)
        throw MatrixFormatError(K::truncated, "payload size mismatch: " + path.string());
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    const char* p = bytes.data() + kMatrixHeaderBytes;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j, p += sizeof(double)) m(i, j) = get_le<double>(p);
    return m;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw MatrixFormatError(MatrixFormatError::Kind::io, "cannot open " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw MatrixFormatError(MatrixFormatError::Kind::io, "write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MatrixFormatError(MatrixFormatError::Kind::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return std::move(ss).str();
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("SHA-256 failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

}  // namespace ckba::io
