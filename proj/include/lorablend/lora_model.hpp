#pragma once

#include "lorablend/linalg.hpp"
#include "lorablend/tensor_store.hpp"

#include <map>
#include <string>
#include <vector>

namespace lorablend {

// One adapted projection: delta = scale * B * A with B (m x r) and A (r x n).
class LoraLayer {
public:
    LoraLayer(std::string name, Matrix down, Matrix up, double scale = 1.0);

    const std::string& name() const noexcept { return name_; }
    const Matrix& down() const noexcept { return down_; } // A, r x n
    const Matrix& up() const noexcept { return up_; }     // B, m x r
    double scale() const noexcept { return scale_; }

    std::size_t rank() const noexcept { return down_.rows(); }
    std::size_t out_features() const noexcept { return up_.rows(); } // m
    std::size_t in_features() const noexcept { return down_.cols(); } // n

    bool operator==(const LoraLayer&) const = default;

private:
    std::string name_;
    Matrix down_;
    Matrix up_;
    double scale_;
};

struct LoraAdapter {
    std::map<std::string, LoraLayer> layers;
    std::string label;
    // Widest dtype seen among the source factors; used when writing back.
    DType dtype = DType::F32;
};

enum class PairingScheme { LoraAB, LoraDownUp };

// Pattern-driven discovery. Recognised keys, per layer prefix:
//   {prefix}.lora_A.weight / {prefix}.lora_B.weight
//   {prefix}.lora_down.weight / {prefix}.lora_up.weight
//   {prefix}.alpha (optional scalar; scale = alpha / r)
struct AdapterScan {
    LoraAdapter adapter;
    // LoRA-pattern tensors that could not be paired (a factor without its
    // partner, or an alpha with no factors).
    std::vector<std::string> orphans;
};

// Never throws OrphanedTensor; orphans are listed instead.
AdapterScan scan_adapter(const TensorMap& map, std::string label);
// Strict variant: any orphan raises OrphanedTensor.
LoraAdapter extract_adapter(const TensorMap& map, std::string label);

// Folds each layer's scale into B so every scale becomes 1.
LoraAdapter normalize_scale(const LoraAdapter& adapter);
LoraLayer normalize_scale(const LoraLayer& layer);

// Appends zero columns to B and zero rows to A up to `target_rank`.
LoraLayer pad_rank(const LoraLayer& layer, std::size_t target_rank);

// scale * B * A, m x n.
Matrix materialize_delta(const LoraLayer& layer);

// Writes factors under the lora_A/lora_B scheme with scales folded into B.
TensorMap adapter_to_tensor_map(const LoraAdapter& adapter, DType dtype);
TensorMap adapter_to_tensor_map(const LoraAdapter& adapter);

} // namespace lorablend
