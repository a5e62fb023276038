#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "ckba/io.hpp"

using namespace ckba;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const char* name) {
    const auto dir = fs::temp_directory_path() / "ckba_io_tests";
    fs::create_directories(dir);
    return dir / name;
}

io::MatrixFormatError::Kind failure_kind(const fs::path& p) {
    try {
        io::read_matrix(p);
    } catch (const io::MatrixFormatError& e) {
        return e.kind();
    }
    FAIL("read_matrix accepted a malformed file");
    return io::MatrixFormatError::Kind::io;
}

}  // namespace

TEST_CASE("round trip is bitwise exact") {
    Eigen::MatrixXd m(3, 4);
    m << 0.1, -2.5e300, 3.0, 1e-310, 4.0, 5.0, -0.0, 7.125, 8.0, 9.0, 10.0, 1.0 / 3.0;
    const auto p = scratch("m.ckba");
    io::write_matrix(p, m);
    const auto back = io::read_matrix(p);
    REQUIRE(back.rows() == 3);
    REQUIRE(back.cols() == 4);
    CHECK(std::memcmp(back.data(), m.data(), sizeof(double) * 12) == 0);
    CHECK(fs::file_size(p) == 24 + 12 * 8);

    // Row-major payload: the second stored value is m(0, 1).
    const std::string bytes = io::read_file(p);
    double second;
    std::memcpy(&second, bytes.data() + 24 + 8, 8);
    CHECK(second == m(0, 1));
}

TEST_CASE("empty matrix is a bare header") {
    const auto p = scratch("empty.ckba");
    io::write_matrix(p, Eigen::MatrixXd(0, 0));
    CHECK(fs::file_size(p) == 24);
    const auto back = io::read_matrix(p);
    CHECK(back.rows() == 0);
    CHECK(back.cols() == 0);
    const std::string bytes = io::read_file(p);
    CHECK(bytes.substr(0, 4) == "CKBA");
}

TEST_CASE("malformed files are classified") {
    const auto good = scratch("good.ckba");
    io::write_matrix(good, Eigen::MatrixXd::Ones(2, 2));
    std::string bytes = io::read_file(good);

    const auto p = scratch("bad.ckba");
    io::write_file_atomic(p, bytes.substr(0, bytes.size() - 3));
    CHECK(failure_kind(p) == io::MatrixFormatError::Kind::truncated);
    io::write_file_atomic(p, bytes.substr(0, 10));
    CHECK(failure_kind(p) == io::MatrixFormatError::Kind::truncated);

    std::string wrong = bytes;
    wrong[0] = 'X';
    io::write_file_atomic(p, wrong);
    CHECK(failure_kind(p) == io::MatrixFormatError::Kind::bad_magic);

    wrong = bytes;
    wrong[4] = 7;
    io::write_file_atomic(p, wrong);
    CHECK(failure_kind(p) == io::MatrixFormatError::Kind::bad_version);

    CHECK(failure_kind(scratch("missing.ckba")) == io::MatrixFormatError::Kind::io);
}

TEST_CASE("non-finite entries are rejected") {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(2, 2);
    m(1, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(io::write_matrix(scratch("nan.ckba"), m), ValidationError);
}

TEST_CASE("sha256") {
    CHECK(io::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    const auto p = scratch("hash.txt");
    io::write_file_atomic(p, "abc");
    CHECK(io::sha256_file(p) == io::sha256_hex("abc"));
}
