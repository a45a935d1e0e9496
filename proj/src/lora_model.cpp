#include "lorablend/lora_model.hpp"

#include "lorablend/error.hpp"

#include <cmath>
#include <optional>
#include <set>
#include <string_view>

namespace lorablend {

namespace {

enum class Role { Down, Up, Alpha };

struct KeyMatch {
    std::string prefix;
    Role role;
    PairingScheme scheme;
};

std::optional<KeyMatch> match_key(std::string_view key) {
    struct Suffix {
        std::string_view text;
        Role role;
        PairingScheme scheme;
    };
    static constexpr Suffix suffixes[] = {
        {".lora_A.weight", Role::Down, PairingScheme::LoraAB},
        {".lora_B.weight", Role::Up, PairingScheme::LoraAB},
        {".lora_down.weight", Role::Down, PairingScheme::LoraDownUp},
        {".lora_up.weight", Role::Up, PairingScheme::LoraDownUp},
        {".alpha", Role::Alpha, PairingScheme::LoraAB},
    };
    for (const auto& s : suffixes) {
        if (key.size() > s.text.size() && key.ends_with(s.text)) {
            return KeyMatch{std::string(key.substr(0, key.size() - s.text.size())), s.role, s.scheme};
        }
    }
    return std::nullopt;
}

Matrix tensor_to_matrix(const Tensor& t) {
    if (t.shape().size() != 2) {
        fail(Errc::ShapeIncompatible, "tensor '" + t.name() + "' is not 2-D (" + std::to_string(t.shape().size()) +
                                          " dims)");
    }
    const auto rows = static_cast<std::size_t>(t.shape()[0]);
    const auto cols = static_cast<std::size_t>(t.shape()[1]);
    Matrix m(rows, cols, t.to_f64());
    if (!all_finite(m)) fail(Errc::InvalidParameter, "tensor '" + t.name() + "' has non-finite values");
    return m;
}

struct Slot {
    const Tensor* down = nullptr;
    const Tensor* up = nullptr;
    const Tensor* alpha = nullptr;
    std::vector<const Tensor*> extra; // second factor of the same role under the other scheme
};

} // namespace

LoraLayer::LoraLayer(std::string name, Matrix down, Matrix up, double scale)
    : name_(std::move(name)), down_(std::move(down)), up_(std::move(up)), scale_(scale) {
    if (down_.rows() == 0) fail(Errc::ShapeIncompatible, "layer '" + name_ + "': rank must be at least 1");
    if (down_.rows() != up_.cols()) {
        fail(Errc::ShapeIncompatible, "layer '" + name_ + "': A has " + std::to_string(down_.rows()) +
                                          " rows but B has " + std::to_string(up_.cols()) + " columns");
    }
    if (!std::isfinite(scale_) || scale_ <= 0.0) {
        fail(Errc::InvalidParameter, "layer '" + name_ + "': scale must be finite and positive");
    }
}

AdapterScan scan_adapter(const TensorMap& map, std::string label) {
    std::map<std::string, Slot> slots;
    for (const auto& [key, tensor] : map.tensors()) {
        const auto m = match_key(key);
        if (!m) continue;
        Slot& slot = slots[m->prefix];
        const Tensor** target = m->role == Role::Down ? &slot.down : m->role == Role::Up ? &slot.up : &slot.alpha;
        if (*target) slot.extra.push_back(&tensor);
        else *target = &tensor;
    }

    AdapterScan scan;
    scan.adapter.label = std::move(label);
    bool first = true;
    for (const auto& [prefix, slot] : slots) {
        for (const Tensor* t : slot.extra) scan.orphans.push_back(t->name());
        if (!slot.down || !slot.up) {
            for (const Tensor* t : {slot.down, slot.up, slot.alpha}) {
                if (t) scan.orphans.push_back(t->name());
            }
            continue;
        }
        Matrix down = tensor_to_matrix(*slot.down);
        Matrix up = tensor_to_matrix(*slot.up);
        if (down.rows() != up.cols()) {
            fail(Errc::ShapeIncompatible, "layer '" + prefix + "': " + slot.down->name() + " has " +
                                              std::to_string(down.rows()) + " rows, " + slot.up->name() + " has " +
                                              std::to_string(up.cols()) + " columns");
        }
        double scale = 1.0;
        if (slot.alpha) {
            if (slot.alpha->numel() != 1) {
                fail(Errc::ShapeIncompatible, "'" + slot.alpha->name() + "' must hold a single value");
            }
            scale = slot.alpha->to_f64()[0] / static_cast<double>(down.rows());
        }
        const DType dt = widest(slot.down->dtype(), slot.up->dtype());
        scan.adapter.dtype = first ? dt : widest(scan.adapter.dtype, dt);
        first = false;
        scan.adapter.layers.emplace(prefix, LoraLayer(prefix, std::move(down), std::move(up), scale));
    }
    return scan;
}

LoraAdapter extract_adapter(const TensorMap& map, std::string label) {
    AdapterScan scan = scan_adapter(map, std::move(label));
    if (!scan.orphans.empty()) {
        std::string list;
        for (const auto& o : scan.orphans) list += (list.empty() ? "" : ", ") + o;
        fail(Errc::OrphanedTensor, "unpaired LoRA tensors: " + list);
    }
    return std::move(scan.adapter);
}

LoraLayer normalize_scale(const LoraLayer& layer) {
    if (layer.scale() == 1.0) return layer;
    return LoraLayer(layer.name(), layer.down(), scaled(layer.up(), layer.scale()), 1.0);
}

LoraAdapter normalize_scale(const LoraAdapter& adapter) {
    LoraAdapter out;
    out.label = adapter.label;
    out.dtype = adapter.dtype;
    for (const auto& [name, layer] : adapter.layers) out.layers.emplace(name, normalize_scale(layer));
    return out;
}

LoraLayer pad_rank(const LoraLayer& layer, std::size_t target_rank) {
    const std::size_t r = layer.rank();
    if (target_rank < r) {
        fail(Errc::RankShrinkRequested, "layer '" + layer.name() + "': cannot pad rank " + std::to_string(r) +
                                            " down to " + std::to_string(target_rank));
    }
    if (target_rank == r) return layer;
    Matrix down(target_rank, layer.in_features());
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < layer.in_features(); ++j) down(i, j) = layer.down()(i, j);
    }
    Matrix up(layer.out_features(), target_rank);
    for (std::size_t i = 0; i < layer.out_features(); ++i) {
        for (std::size_t j = 0; j < r; ++j) up(i, j) = layer.up()(i, j);
    }
    return LoraLayer(layer.name(), std::move(down), std::move(up), layer.scale());
}

Matrix materialize_delta(const LoraLayer& layer) {
    // (scale * B) * A, the same product normalize_scale would leave behind.
    if (layer.scale() == 1.0) return matmul(layer.up(), layer.down());
    return matmul(scaled(layer.up(), layer.scale()), layer.down());
}

TensorMap adapter_to_tensor_map(const LoraAdapter& adapter, DType dtype) {
    TensorMap map;
    for (const auto& [name, raw] : adapter.layers) {
        const LoraLayer layer = normalize_scale(raw);
        map.insert(Tensor::from_f64(name + ".lora_A.weight", dtype, {layer.rank(), layer.in_features()},
                                    layer.down().values()));
        map.insert(Tensor::from_f64(name + ".lora_B.weight", dtype, {layer.out_features(), layer.rank()},
                                    layer.up().values()));
    }
    return map;
}

TensorMap adapter_to_tensor_map(const LoraAdapter& adapter) {
    return adapter_to_tensor_map(adapter, adapter.dtype);
}

} // namespace lorablend
