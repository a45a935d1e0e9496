#pragma once

#include "lorablend/lora_model.hpp"
#include "lorablend/random.hpp"
#include "lorablend/tensor_store.hpp"

#include <cstring>

#include <filesystem>
#include <random>
#include <string>

namespace fixtures {

inline lorablend::LoraLayer random_layer(const std::string& name, std::size_t m, std::size_t n, std::size_t r,
                                         lorablend::Rng& rng, double scale = 1.0) {
    return lorablend::LoraLayer(name, lorablend::random_matrix(r, n, rng), lorablend::random_matrix(m, r, rng), scale);
}

// Arbitrary container contents: raw random bytes (NaN payloads included),
// rank 0-3 shapes with possibly empty dimensions, optional metadata.
inline lorablend::TensorMap random_tensor_map(lorablend::Rng& rng) {
    using namespace lorablend;
    static const char alphabet[] = "abcxyz_.09ABQ";
    TensorMap map;
    const std::size_t count = rng.index(0, 6);
    while (map.size() < count) {
        std::string name;
        const std::size_t len = rng.index(1, 12);
        for (std::size_t i = 0; i < len; ++i) name += alphabet[rng.index(0, sizeof(alphabet) - 2)];
        if (map.contains(name) || name == kMetadataKey) continue;
        const DType dtype = static_cast<DType>(rng.index(0, 3));
        Shape shape(rng.index(0, 3));
        for (auto& d : shape) d = rng.index(0, 5);
        std::uint64_t numel = 1;
        for (auto d : shape) numel *= d;
        std::vector<std::byte> data(numel * dtype_width(dtype));
        for (auto& b : data) b = static_cast<std::byte>(rng.next() & 0xff);
        map.insert(Tensor(name, dtype, shape, std::move(data)));
    }
    const std::size_t meta = rng.index(0, 3);
    for (std::size_t i = 0; i < meta; ++i) {
        map.metadata()["k" + std::to_string(rng.index(0, 99))] = "v\"\n\u00e9" + std::to_string(rng.next() % 1000);
    }
    return map;
}

// Hand-made container bytes: u64 length prefix, header text, then payload.
inline std::vector<std::byte> raw_container(const std::string& header, std::size_t payload_bytes) {
    std::vector<std::byte> out(8 + header.size() + payload_bytes, std::byte{0});
    std::uint64_t n = header.size();
    for (int i = 0; i < 8; ++i) out[i] = static_cast<std::byte>((n >> (8 * i)) & 0xff);
    std::memcpy(out.data() + 8, header.data(), header.size());
    return out;
}

// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("lorablend_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    std::filesystem::path path_;
};

} // namespace fixtures
