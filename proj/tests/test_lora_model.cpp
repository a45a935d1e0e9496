#include "doctest.h"
#include "fixtures.hpp"
#include "oracle.hpp"

#include "lorablend/error.hpp"
#include "lorablend/lora_model.hpp"

#include <algorithm>

using namespace lorablend;

namespace {

Tensor f32(const std::string& name, std::size_t rows, std::size_t cols, Rng& rng) {
    const Matrix m = random_matrix(rows, cols, rng);
    return Tensor::from_f64(name, DType::F32, {rows, cols}, m.values());
}

Tensor scalar(const std::string& name, double v) {
    return Tensor::from_f64(name, DType::F32, {}, std::vector<double>{v});
}

Errc code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected lorablend::Error");
    return Errc::InvalidParameter;
}

} // namespace

TEST_SUITE("lora_model") {

TEST_CASE("pairs lora_A / lora_B") {
    Rng rng(1);
    TensorMap map;
    map.insert(f32("x.lora_A.weight", 4, 32, rng));
    map.insert(f32("x.lora_B.weight", 16, 4, rng));
    const LoraAdapter ad = extract_adapter(map, "young");
    REQUIRE(ad.layers.size() == 1);
    const LoraLayer& l = ad.layers.at("x");
    CHECK(l.rank() == 4);
    CHECK(l.out_features() == 16);
    CHECK(l.in_features() == 32);
    CHECK(l.scale() == 1.0);
    CHECK(ad.label == "young");
    CHECK(ad.dtype == DType::F32);

    map.insert(scalar("x.alpha", 8));
    CHECK(extract_adapter(map, "young").layers.at("x").scale() == 2.0);
}

TEST_CASE("mixed naming schemes match a hand-built manifest") {
    Rng rng(2);
    TensorMap map;
    map.insert(f32("unet.down.0.attn.to_k.lora_A.weight", 2, 10, rng));
    map.insert(f32("unet.down.0.attn.to_k.lora_B.weight", 12, 2, rng));
    map.insert(f32("te.layer3.q_proj.lora_down.weight", 3, 7, rng));
    map.insert(f32("te.layer3.q_proj.lora_up.weight", 5, 3, rng));
    map.insert(scalar("te.layer3.q_proj.alpha", 6));
    map.insert(f32("mid.to_v.lora_down.weight", 1, 4, rng));
    map.insert(f32("mid.to_v.lora_up.weight", 4, 1, rng));
    map.insert(f32("unrelated.weight", 3, 3, rng));

    struct Expect {
        std::string name;
        std::size_t m, n, r;
        double scale;
    };
    const std::vector<Expect> manifest{
        {"mid.to_v", 4, 4, 1, 1.0},
        {"te.layer3.q_proj", 5, 7, 3, 2.0},
        {"unet.down.0.attn.to_k", 12, 10, 2, 1.0},
    };
    const AdapterScan scan = scan_adapter(map, "a");
    CHECK(scan.orphans.empty());
    REQUIRE(scan.adapter.layers.size() == manifest.size());
    for (const Expect& e : manifest) {
        const LoraLayer& l = scan.adapter.layers.at(e.name);
        CHECK(l.out_features() == e.m);
        CHECK(l.in_features() == e.n);
        CHECK(l.rank() == e.r);
        CHECK(l.scale() == e.scale);
        CHECK(l.name() == e.name);
    }
}

TEST_CASE("orphans and shape errors") {
    Rng rng(3);
    TensorMap map;
    map.insert(f32("a.lora_A.weight", 2, 4, rng));
    map.insert(f32("b.lora_up.weight", 4, 2, rng));
    map.insert(scalar("c.alpha", 4));
    map.insert(f32("d.lora_A.weight", 2, 4, rng));
    map.insert(f32("d.lora_B.weight", 4, 2, rng));
    const AdapterScan scan = scan_adapter(map, "x");
    std::vector<std::string> orphans = scan.orphans;
    std::sort(orphans.begin(), orphans.end());
    CHECK(orphans == std::vector<std::string>{"a.lora_A.weight", "b.lora_up.weight", "c.alpha"});
    CHECK(scan.adapter.layers.size() == 1);
    CHECK(code_of([&] { extract_adapter(map, "x"); }) == Errc::OrphanedTensor);

    TensorMap bad;
    bad.insert(f32("e.lora_A.weight", 3, 4, rng));
    bad.insert(f32("e.lora_B.weight", 4, 2, rng));
    CHECK(code_of([&] { extract_adapter(bad, "x"); }) == Errc::ShapeIncompatible);

    TensorMap flat;
    flat.insert(Tensor::from_f64("f.lora_A.weight", DType::F32, {4}, std::vector<double>(4, 1.0)));
    flat.insert(f32("f.lora_B.weight", 4, 1, rng));
    CHECK(code_of([&] { extract_adapter(flat, "x"); }) == Errc::ShapeIncompatible);

    TensorMap both;
    both.insert(f32("g.lora_A.weight", 2, 4, rng));
    both.insert(f32("g.lora_down.weight", 2, 4, rng));
    both.insert(f32("g.lora_B.weight", 4, 2, rng));
    CHECK(scan_adapter(both, "x").orphans == std::vector<std::string>{"g.lora_down.weight"});
}

TEST_CASE("layer invariants") {
    CHECK(code_of([] { LoraLayer("z", Matrix(0, 3), Matrix(3, 0)); }) == Errc::ShapeIncompatible);
    CHECK(code_of([] { LoraLayer("z", Matrix(2, 3), Matrix(3, 1)); }) == Errc::ShapeIncompatible);
    CHECK(code_of([] { LoraLayer("z", Matrix(1, 3), Matrix(3, 1), 0.0); }) == Errc::InvalidParameter);
    CHECK(code_of([] { LoraLayer("z", Matrix(1, 3), Matrix(3, 1), -1.0); }) == Errc::InvalidParameter);
}

TEST_CASE("materialize") {
    CHECK(materialize_delta(LoraLayer("z", Matrix(1, 2, {5, 6}), Matrix(2, 1))) == Matrix(2, 2));
    const LoraLayer outer("o", Matrix(1, 2, {0, 1}), Matrix(2, 1, {1, 0}));
    CHECK(materialize_delta(outer) == Matrix(2, 2, {0, 1, 0, 0}));

    Rng rng(4);
    const LoraLayer l = fixtures::random_layer("r", 9, 7, 3, rng, 0.75);
    const Matrix want = scaled(oracle::naive_matmul(l.up(), l.down()), 0.75);
    CHECK(oracle::rel_fro_diff(materialize_delta(l), want) <= 1e-14);
}

TEST_CASE("normalize_scale preserves the update") {
    Rng rng(5);
    const LoraLayer unit = fixtures::random_layer("u", 6, 5, 2, rng);
    CHECK(normalize_scale(unit) == unit);

    const LoraLayer two = fixtures::random_layer("t", 6, 5, 2, rng, 2.0);
    const LoraLayer n2 = normalize_scale(two);
    CHECK(n2.scale() == 1.0);
    CHECK(n2.up() == scaled(two.up(), 2.0));
    CHECK(materialize_delta(n2) == materialize_delta(two));

    for (int i = 0; i < 50; ++i) {
        const LoraLayer l = fixtures::random_layer("r", rng.index(1, 20), rng.index(1, 20), rng.index(1, 6), rng,
                                                   rng.uniform(0.1, 10.0));
        const Matrix before = materialize_delta(l);
        const Matrix after = materialize_delta(normalize_scale(l));
        CHECK(oracle::fro(before - after) <= 1e-12 * oracle::fro(before));
    }
}

TEST_CASE("pad_rank is exact and commutes with normalize_scale") {
    Rng rng(6);
    const LoraLayer l = fixtures::random_layer("p", 8, 11, 4, rng, 1.5);
    CHECK(pad_rank(l, 4) == l);
    const LoraLayer p = pad_rank(l, 16);
    CHECK(p.rank() == 16);
    for (std::size_t i = 4; i < 16; ++i) {
        for (std::size_t j = 0; j < 11; ++j) CHECK(p.down()(i, j) == 0.0);
        for (std::size_t j = 0; j < 8; ++j) CHECK(p.up()(j, i) == 0.0);
    }
    CHECK(materialize_delta(p) == materialize_delta(l));
    CHECK(materialize_delta(normalize_scale(pad_rank(l, 9))) == materialize_delta(pad_rank(normalize_scale(l), 9)));
    CHECK(normalize_scale(pad_rank(l, 9)) == pad_rank(normalize_scale(l), 9));
    CHECK(code_of([&] { pad_rank(l, 3); }) == Errc::RankShrinkRequested);

    for (int i = 0; i < 30; ++i) {
        const LoraLayer r = fixtures::random_layer("r", rng.index(1, 16), rng.index(1, 16), rng.index(1, 4), rng);
        CHECK(materialize_delta(pad_rank(r, r.rank() + rng.index(0, 8))) == materialize_delta(r));
    }
}

TEST_CASE("adapter round-trip through a container") {
    Rng rng(7);
    LoraAdapter ad;
    ad.label = "y";
    ad.dtype = DType::F64;
    for (int i = 0; i < 5; ++i) {
        const std::string name = "blk" + std::to_string(i) + ".to_k";
        ad.layers.emplace(name, fixtures::random_layer(name, rng.index(2, 12), rng.index(2, 12), rng.index(1, 3), rng,
                                                       i == 2 ? 0.5 : 1.0));
    }
    const TensorMap map = adapter_to_tensor_map(ad);
    for (const auto& [key, t] : map.tensors()) CHECK(t.dtype() == DType::F64);
    const LoraAdapter back = extract_adapter(parse_container(serialize_container(map)), "y");
    CHECK(back.layers.size() == ad.layers.size());
    CHECK(back.dtype == DType::F64);
    for (const auto& [name, layer] : ad.layers) CHECK(back.layers.at(name) == normalize_scale(layer));
}

} // TEST_SUITE
