#include "doctest.h"
#include "fixtures.hpp"

#include "lorablend/error.hpp"
#include "lorablend/tensor_store.hpp"

#include "json.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

using namespace lorablend;

namespace {

Errc parse_error(const std::vector<std::byte>& bytes) {
    try {
        parse_container(bytes);
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("container unexpectedly parsed");
    return Errc::InvalidParameter;
}

std::string header_of(const std::vector<std::byte>& file) {
    std::uint64_t n = 0;
    std::memcpy(&n, file.data(), 8);
    return std::string(reinterpret_cast<const char*>(file.data() + 8), n);
}

// Binary16 / bfloat16 decoding straight from the bit fields.
double decode_small(std::uint16_t bits, int exp_bits, int mant_bits) {
    const int bias = (1 << (exp_bits - 1)) - 1;
    const int sign = bits >> (exp_bits + mant_bits);
    const int e = (bits >> mant_bits) & ((1 << exp_bits) - 1);
    const int f = bits & ((1 << mant_bits) - 1);
    double mag;
    if (e == (1 << exp_bits) - 1) mag = f ? std::numeric_limits<double>::quiet_NaN() : INFINITY;
    else if (e == 0) mag = std::ldexp(f, 1 - bias - mant_bits);
    else mag = std::ldexp(f + (1 << mant_bits), e - bias - mant_bits);
    return sign ? -mag : mag;
}

// Every gap between consecutive positive finite codes: points just inside
// each half round to the near code, the exact midpoint to the even one.
void exhaustive_rounding(int exp_bits, int mant_bits, std::uint16_t (*narrow)(double), double (*widen)(std::uint16_t)) {
    const std::uint16_t inf = std::uint16_t(((1u << exp_bits) - 1) << mant_bits);
    std::size_t failures = 0;
    for (std::uint32_t h = 0; h < inf; ++h) {
        const double lo = decode_small(std::uint16_t(h), exp_bits, mant_bits);
        if (widen(std::uint16_t(h)) != lo) ++failures;
        if (narrow(lo) != h) ++failures;
        if (narrow(-lo) != (h | (1u << (exp_bits + mant_bits)))) ++failures;
        const double hi = decode_small(std::uint16_t(h + 1), exp_bits, mant_bits);
        const double mid = lo + (hi - lo) / 2;
        const std::uint16_t even = (h % 2 == 0) ? std::uint16_t(h) : std::uint16_t(h + 1);
        if (h + 1 == inf) {
            // Half an ulp past the largest finite value rounds to infinity.
            const double top = lo + (lo - decode_small(std::uint16_t(h - 1), exp_bits, mant_bits)) / 2;
            if (narrow(top) != inf) ++failures;
            if (narrow(std::nextafter(top, 0.0)) != h) ++failures;
            continue;
        }
        if (narrow(mid) != even) ++failures;
        if (narrow(std::nextafter(mid, 0.0)) != h) ++failures;
        if (narrow(std::nextafter(mid, INFINITY)) != h + 1) ++failures;
    }
    CHECK(failures == 0);
}

} // namespace

TEST_SUITE("tensor_store") {

TEST_CASE("one float32 tensor") {
    TensorMap m;
    std::vector<double> vals(32);
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(i) * 0.25;
    m.insert(Tensor::from_f64("a.lora_A.weight", DType::F32, {4, 8}, vals));
    const auto file = serialize_container(m);
    const TensorMap back = parse_container(file);
    REQUIRE(back.size() == 1);
    const Tensor& t = back.at("a.lora_A.weight");
    CHECK(t.bytes().size() == 128);
    CHECK(t.shape() == Shape{4, 8});
    CHECK(t.to_f64() == vals);
    CHECK(file.size() == 8 + header_of(file).size() + 128);
}

TEST_CASE("empty container") {
    const auto file = serialize_container(TensorMap{});
    const std::string header = header_of(file);
    CHECK(nlohmann::json::parse(header) == nlohmann::json::object());
    CHECK(header.size() % 8 == 0);
    CHECK(file.size() == 8 + header.size());
    CHECK(parse_container(file).empty());
    CHECK(parse_container(fixtures::raw_container("{}", 0)).empty());
}

TEST_CASE("regions follow lexicographic order") {
    TensorMap m;
    const std::vector<double> two{1, 2};
    m.insert(Tensor::from_f64("b", DType::F64, {2}, two));
    m.insert(Tensor::from_f64("a", DType::F32, {2}, two));
    m.metadata()["note"] = "x";
    const auto file = serialize_container(m);
    const auto header = nlohmann::json::parse(header_of(file));
    CHECK(header["a"]["data_offsets"] == nlohmann::json::array({0, 8}));
    CHECK(header["b"]["data_offsets"] == nlohmann::json::array({8, 24}));
    CHECK(header["__metadata__"]["note"] == "x");
    CHECK(header["a"]["dtype"] == "F32");
}

TEST_CASE("random maps round-trip bit-exactly and re-serialize identically") {
    Rng rng(99);
    for (int i = 0; i < 100; ++i) {
        const TensorMap m = fixtures::random_tensor_map(rng);
        const auto file = serialize_container(m);
        const TensorMap back = parse_container(file);
        CHECK(back == m);
        CHECK(serialize_container(back) == file);
    }
}

TEST_CASE("non-canonical files normalise idempotently") {
    // Out-of-order regions, unpadded header, extra whitespace.
    const std::string header =
        R"({ "z": {"dtype":"F32","shape":[1],"data_offsets":[0,4]}, "a": {"dtype":"F32","shape":[1],"data_offsets":[4,8]} })";
    auto file = fixtures::raw_container(header, 8);
    const float one = 1.0f, two = 2.0f;
    std::memcpy(file.data() + 8 + header.size(), &one, 4);
    std::memcpy(file.data() + 12 + header.size(), &two, 4);
    const TensorMap first = parse_container(file);
    CHECK(first.at("z").to_f64() == std::vector<double>{1.0});
    CHECK(first.at("a").to_f64() == std::vector<double>{2.0});
    const auto canon = serialize_container(first);
    CHECK(parse_container(canon) == first);
    CHECK(serialize_container(parse_container(canon)) == canon);
}

TEST_CASE("file round-trip and io failures") {
    fixtures::TempDir dir("ts");
    Rng rng(4);
    const TensorMap m = fixtures::random_tensor_map(rng);
    write_container(dir / "x.safetensors", m);
    CHECK(read_container(dir / "x.safetensors") == m);
    CHECK_THROWS_AS(read_container(dir / "missing.safetensors"), Error);
    try {
        write_container(dir / "no" / "such" / "dir.safetensors", m);
        FAIL("write should fail");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::IoFailure);
    }
}

TEST_CASE("diagnostics for malformed containers") {
    CHECK(parse_error({}) == Errc::MalformedHeader);
    CHECK(parse_error(std::vector<std::byte>(5)) == Errc::MalformedHeader);
    auto huge = fixtures::raw_container("{}", 0);
    huge[7] = std::byte{0x40};
    CHECK(parse_error(huge) == Errc::MalformedHeader);
    CHECK(parse_error(fixtures::raw_container("{not json", 0)) == Errc::MalformedHeader);
    CHECK(parse_error(fixtures::raw_container("[1,2]", 0)) == Errc::MalformedHeader);
    CHECK(parse_error(fixtures::raw_container(R"({"a":{"dtype":"I8","shape":[1],"data_offsets":[0,1]}})", 1)) ==
          Errc::UnknownDtype);
    CHECK(parse_error(fixtures::raw_container(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})", 4)) ==
          Errc::OffsetOverlap);
    CHECK(parse_error(fixtures::raw_container(
              R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})",
              8)) == Errc::OffsetOverlap);
    CHECK(parse_error(fixtures::raw_container(R"({"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", 8)) ==
          Errc::MalformedHeader);
    CHECK(parse_error(fixtures::raw_container(
              R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})",
              4)) == Errc::MalformedHeader);
    CHECK(parse_error(fixtures::raw_container(R"({"__metadata__":{"k":1}})", 0)) == Errc::MalformedHeader);
    CHECK(parse_error(fixtures::raw_container(R"({"a":{"dtype":"F32","shape":[-1],"data_offsets":[0,4]}})", 4)) ==
          Errc::MalformedHeader);
    // Trailing bytes that belong to no tensor.
    CHECK(parse_error(fixtures::raw_container(R"({"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})", 12)) ==
          Errc::MalformedHeader);
}

TEST_CASE("truncation and corruption never escape as anything but Error") {
    Rng rng(31337);
    std::size_t rejected = 0;
    for (int i = 0; i < 150; ++i) {
        TensorMap m = fixtures::random_tensor_map(rng);
        if (m.empty()) m.insert(Tensor::from_f64("w", DType::F32, {3}, std::vector<double>{1, 2, 3}));
        auto file = serialize_container(m);
        if (i % 2 == 0) {
            file.resize(rng.index(0, file.size() - 1));
        } else {
            const std::size_t header_end = 8 + header_of(file).size();
            const std::size_t flips = rng.index(1, 4);
            for (std::size_t f = 0; f < flips; ++f) {
                const std::size_t pos = rng.index(0, std::min(file.size() - 1, header_end));
                file[pos] = static_cast<std::byte>(rng.next() & 0xff);
            }
        }
        try {
            (void)parse_container(file);
        } catch (const Error&) {
            ++rejected;
        } catch (...) {
            FAIL("non-library exception");
        }
    }
    CHECK(rejected >= 75); // every truncation must be caught
}

TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor("t", DType::F32, {2, 2}, std::vector<std::byte>(15)), Error);
    CHECK(Tensor("s", DType::F64, {}, std::vector<std::byte>(8)).numel() == 1);
    CHECK(Tensor("e", DType::F16, {3, 0}, {}).numel() == 0);
    CHECK_FALSE(checked_numel({1ull << 32, 1ull << 31}).has_value());
    CHECK(checked_numel({1ull << 31, 1ull << 31}).value() == (1ull << 62));
    TensorMap m;
    m.insert(Tensor("x", DType::F32, {}, std::vector<std::byte>(4)));
    CHECK_THROWS_AS(m.insert(Tensor("x", DType::F32, {}, std::vector<std::byte>(4))), Error);
    CHECK_THROWS_AS(m.insert(Tensor("__metadata__", DType::F32, {}, std::vector<std::byte>(4))), Error);
}

TEST_CASE("dtype names and widths") {
    for (DType d : {DType::F16, DType::BF16, DType::F32, DType::F64}) CHECK(parse_dtype(dtype_name(d)) == d);
    CHECK_FALSE(parse_dtype("F8").has_value());
    CHECK(dtype_width(DType::BF16) == 2);
    CHECK(widest(DType::BF16, DType::F16) == DType::F16);
    CHECK(widest(DType::F64, DType::F16) == DType::F64);
}

TEST_CASE("casting") {
    const Tensor one = Tensor::from_f64("t", DType::F32, {1}, std::vector<double>{1.0});
    const Tensor h = cast_tensor(one, DType::F16);
    CHECK(h.dtype() == DType::F16);
    CHECK(h.name() == "t");
    CHECK(h.shape() == Shape{1});
    CHECK(h.to_f64() == std::vector<double>{1.0});

    Rng rng(8);
    std::vector<double> vals(500);
    for (double& v : vals) v = std::ldexp(rng.uniform(-1, 1), static_cast<int>(rng.index(0, 80)) - 40);
    const Tensor d = Tensor::from_f64("d", DType::F64, {500}, vals);
    const auto back = cast_tensor(cast_tensor(d, DType::F32), DType::F64).to_f64();
    for (std::size_t i = 0; i < vals.size(); ++i) CHECK(std::fabs(back[i] - vals[i]) <= 0x1p-24 * std::fabs(vals[i]));

    std::vector<std::byte> raw(4 * 300);
    for (auto& b : raw) b = static_cast<std::byte>(rng.next() & 0xff);
    const Tensor f("f", DType::F32, {300}, raw);
    const Tensor wide = cast_tensor(f, DType::F64);
    const auto fv = f.to_f64();
    const auto wv = wide.to_f64();
    for (std::size_t i = 0; i < fv.size(); ++i) {
        if (std::isnan(fv[i])) CHECK(std::isnan(wv[i]));
        else CHECK(std::bit_cast<std::uint64_t>(fv[i]) == std::bit_cast<std::uint64_t>(wv[i]));
    }
    CHECK(cast_tensor(wide, DType::F32).to_f64().size() == 300);
}

TEST_CASE("half precision rounding is exhaustive round-to-nearest-even") {
    exhaustive_rounding(5, 10, detail::f64_to_f16_bits, detail::f16_bits_to_f64);
    exhaustive_rounding(8, 7, detail::f64_to_bf16_bits, detail::bf16_bits_to_f64);
    CHECK(detail::f64_to_f16_bits(1e6) == 0x7c00);
    CHECK(std::isnan(detail::f16_bits_to_f64(detail::f64_to_f16_bits(std::nan("")))));
    CHECK(detail::f64_to_f16_bits(-0.0) == 0x8000);
    CHECK(detail::f64_to_f16_bits(0x1p-25) == 0x0000);                     // half of the smallest subnormal, ties to even
    CHECK(detail::f64_to_f16_bits(std::nextafter(0x1p-25, 1.0)) == 0x0001); // just above it
}

} // TEST_SUITE
