#include "lorablend/tensor_store.hpp"

#include "lorablend/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

namespace lorablend {

using json = nlohmann::json;

std::size_t dtype_width(DType dtype) {
    switch (dtype) {
    case DType::F16:
    case DType::BF16: return 2;
    case DType::F32: return 4;
    case DType::F64: return 8;
    }
    return 0;
}

std::string_view dtype_name(DType dtype) {
    switch (dtype) {
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::F32: return "F32";
    case DType::F64: return "F64";
    }
    return "?";
}

std::optional<DType> parse_dtype(std::string_view name) {
    if (name == "F16") return DType::F16;
    if (name == "BF16") return DType::BF16;
    if (name == "F32") return DType::F32;
    if (name == "F64") return DType::F64;
    return std::nullopt;
}

namespace {

int dtype_rank(DType d) {
    switch (d) {
    case DType::BF16: return 0;
    case DType::F16: return 1;
    case DType::F32: return 2;
    case DType::F64: return 3;
    }
    return 0;
}

// Narrow binary64 to a small IEEE-style format with round-to-nearest-even.
std::uint16_t narrow_to_bits(double v, int exp_bits, int mant_bits) {
    const int bias = (1 << (exp_bits - 1)) - 1;
    const std::uint16_t sign = std::signbit(v) ? std::uint16_t(1u << (exp_bits + mant_bits)) : 0;
    const std::uint16_t exp_all_ones = std::uint16_t(((1u << exp_bits) - 1) << mant_bits);
    if (std::isnan(v)) {
        return std::uint16_t(sign | exp_all_ones | (1u << (mant_bits - 1)));
    }
    const double a = std::fabs(v);
    if (std::isinf(a)) return sign | exp_all_ones;
    if (a == 0.0) return sign;

    const int min_normal_exp = 1 - bias;
    int e = 0;
    std::frexp(a, &e);
    e -= 1; // a in [2^e, 2^(e+1))
    const int quantum_exp = std::max(e, min_normal_exp) - mant_bits;
    const double q = std::nearbyint(std::ldexp(a, -quantum_exp));
    const double r = std::ldexp(q, quantum_exp);
    if (r == 0.0) return sign;

    int re = 0;
    std::frexp(r, &re);
    re -= 1;
    if (re < min_normal_exp) {
        // subnormal: quantum is 2^(min_normal_exp - mant_bits)
        return std::uint16_t(sign | static_cast<std::uint16_t>(q));
    }
    if (re > bias) return sign | exp_all_ones;
    const auto mant = static_cast<std::uint32_t>(std::ldexp(r, mant_bits - re)) - (1u << mant_bits);
    return std::uint16_t(sign | (std::uint32_t(re + bias) << mant_bits) | mant);
}

double widen_from_bits(std::uint16_t bits, int exp_bits, int mant_bits) {
    const int bias = (1 << (exp_bits - 1)) - 1;
    const bool neg = (bits >> (exp_bits + mant_bits)) & 1u;
    const std::uint32_t exp_field = (bits >> mant_bits) & ((1u << exp_bits) - 1);
    const std::uint32_t mant = bits & ((1u << mant_bits) - 1);
    double r = 0.0;
    if (exp_field == 0) {
        r = std::ldexp(static_cast<double>(mant), 1 - bias - mant_bits);
    } else if (exp_field == (1u << exp_bits) - 1) {
        r = mant == 0 ? std::numeric_limits<double>::infinity()
                      : std::numeric_limits<double>::quiet_NaN();
    } else {
        r = std::ldexp(static_cast<double>(mant + (1u << mant_bits)),
                       static_cast<int>(exp_field) - bias - mant_bits);
    }
    return neg ? -r : r;
}

template <typename T>
T load(const std::byte* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <typename T>
void store(std::byte* p, T v) {
    std::memcpy(p, &v, sizeof(T));
}

std::vector<std::byte> encode(DType dtype, std::span<const double> values) {
    std::vector<std::byte> out(values.size() * dtype_width(dtype));
    std::byte* p = out.data();
    for (double v : values) {
        switch (dtype) {
        case DType::F16: store(p, detail::f64_to_f16_bits(v)); break;
        case DType::BF16: store(p, detail::f64_to_bf16_bits(v)); break;
        case DType::F32: store(p, static_cast<float>(v)); break;
        case DType::F64: store(p, v); break;
        }
        p += dtype_width(dtype);
    }
    return out;
}

} // namespace

namespace detail {
std::uint16_t f64_to_f16_bits(double v) { return narrow_to_bits(v, 5, 10); }
double f16_bits_to_f64(std::uint16_t bits) { return widen_from_bits(bits, 5, 10); }
std::uint16_t f64_to_bf16_bits(double v) { return narrow_to_bits(v, 8, 7); }
double bf16_bits_to_f64(std::uint16_t bits) { return widen_from_bits(bits, 8, 7); }
} // namespace detail

DType widest(DType a, DType b) {
    return dtype_rank(a) >= dtype_rank(b) ? a : b;
}

std::optional<std::uint64_t> checked_numel(const Shape& shape) {
    constexpr std::uint64_t limit = std::uint64_t(1) << 63;
    std::uint64_t n = 1;
    for (std::uint64_t d : shape) {
        if (d != 0 && n > (limit - 1) / d) return std::nullopt;
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::string name, DType dtype, Shape shape, std::vector<std::byte> data)
    : name_(std::move(name)), dtype_(dtype), shape_(std::move(shape)), data_(std::move(data)) {
    const auto n = checked_numel(shape_);
    if (!n) fail(Errc::InvalidParameter, "tensor '" + name_ + "': element count overflows 63 bits");
    if (*n > data_.size() / dtype_width(dtype_) || data_.size() != *n * dtype_width(dtype_)) {
        fail(Errc::InvalidParameter, "tensor '" + name_ + "': buffer holds " + std::to_string(data_.size()) +
                                         " bytes, shape requires " + std::to_string(*n) + " x " +
                                         std::to_string(dtype_width(dtype_)));
    }
}

Tensor Tensor::from_f64(std::string name, DType dtype, Shape shape, std::span<const double> values) {
    return Tensor(std::move(name), dtype, std::move(shape), encode(dtype, values));
}

std::vector<double> Tensor::to_f64() const {
    const std::size_t n = numel();
    std::vector<double> out(n);
    const std::byte* p = data_.data();
    const std::size_t w = dtype_width(dtype_);
    for (std::size_t i = 0; i < n; ++i, p += w) {
        switch (dtype_) {
        case DType::F16: out[i] = detail::f16_bits_to_f64(load<std::uint16_t>(p)); break;
        case DType::BF16: out[i] = detail::bf16_bits_to_f64(load<std::uint16_t>(p)); break;
        case DType::F32: out[i] = static_cast<double>(load<float>(p)); break;
        case DType::F64: out[i] = load<double>(p); break;
        }
    }
    return out;
}

Tensor Tensor::renamed(std::string name) const {
    Tensor t = *this;
    t.name_ = std::move(name);
    return t;
}

Tensor cast_tensor(const Tensor& t, DType target) {
    if (t.dtype() == target) return t;
    const std::vector<double> values = t.to_f64();
    return Tensor::from_f64(t.name(), target, t.shape(), values);
}

void TensorMap::insert(Tensor t) {
    if (t.name() == kMetadataKey) {
        fail(Errc::InvalidParameter, "tensor name '__metadata__' is reserved");
    }
    std::string key = t.name();
    auto [it, inserted] = tensors_.try_emplace(std::move(key), std::move(t));
    if (!inserted) fail(Errc::InvalidParameter, "duplicate tensor name '" + it->first + "'");
}

const Tensor* TensorMap::find(std::string_view name) const {
    auto it = tensors_.find(name);
    return it == tensors_.end() ? nullptr : &it->second;
}

const Tensor& TensorMap::at(std::string_view name) const {
    const Tensor* t = find(name);
    if (!t) fail(Errc::InvalidParameter, "no tensor named '" + std::string(name) + "'");
    return *t;
}

namespace {

constexpr std::uint64_t kMaxHeaderBytes = 100u << 20;

struct Region {
    std::uint64_t begin;
    std::uint64_t end;
    std::string name;
};

Shape parse_shape(const json& j, const std::string& key) {
    if (!j.is_array()) fail(Errc::MalformedHeader, "tensor '" + key + "': shape is not an array");
    Shape shape;
    shape.reserve(j.size());
    for (const auto& d : j) {
        if (!d.is_number_unsigned()) {
            fail(Errc::MalformedHeader, "tensor '" + key + "': shape entries must be non-negative integers");
        }
        shape.push_back(d.get<std::uint64_t>());
    }
    return shape;
}

} // namespace

TensorMap parse_container(std::span<const std::byte> file) {
    if (file.size() < 8) {
        fail(Errc::MalformedHeader, "file is " + std::to_string(file.size()) +
                                        " bytes, shorter than the 8-byte header length prefix");
    }
    const auto header_len = load<std::uint64_t>(file.data());
    if (header_len > kMaxHeaderBytes || header_len > file.size() - 8) {
        fail(Errc::MalformedHeader, "header length " + std::to_string(header_len) + " at offset 0 exceeds file size " +
                                        std::to_string(file.size()));
    }
    const auto* text = reinterpret_cast<const char*>(file.data() + 8);

    // Duplicate top-level keys are silently merged by the JSON parser, so
    // they are caught while parsing.
    std::set<std::string> seen;
    std::string duplicate;
    json::parser_callback_t on_event = [&](int depth, json::parse_event_t event, json& parsed) {
        if (depth == 1 && event == json::parse_event_t::key) {
            auto key = parsed.get<std::string>();
            if (!seen.insert(key).second && duplicate.empty()) duplicate = key;
        }
        return true;
    };
    json header;
    try {
        header = json::parse(text, text + header_len, on_event);
    } catch (const json::exception& e) {
        fail(Errc::MalformedHeader, std::string("header JSON does not parse: ") + e.what());
    }
    if (!duplicate.empty()) fail(Errc::MalformedHeader, "duplicate header key '" + duplicate + "'");
    if (!header.is_object()) fail(Errc::MalformedHeader, "header is not a JSON object");

    const std::span<const std::byte> buffer = file.subspan(8 + header_len);
    TensorMap map;
    std::vector<Region> regions;
    std::vector<std::pair<const json*, std::string>> entries;
    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& key = it.key();
        const json& value = it.value();
        if (key == kMetadataKey) {
            if (!value.is_object()) fail(Errc::MalformedHeader, "__metadata__ is not an object");
            for (auto m = value.begin(); m != value.end(); ++m) {
                if (!m.value().is_string()) {
                    fail(Errc::MalformedHeader, "__metadata__ value for '" + m.key() + "' is not a string");
                }
                map.metadata().emplace(m.key(), m.value().get<std::string>());
            }
            continue;
        }
        if (!value.is_object()) fail(Errc::MalformedHeader, "entry '" + key + "' is not an object");
        entries.emplace_back(&value, key);
    }

    for (const auto& [value, key] : entries) {
        const json& entry = *value;
        for (const char* field : {"dtype", "shape", "data_offsets"}) {
            if (!entry.contains(field)) fail(Errc::MalformedHeader, "tensor '" + key + "' lacks '" + field + "'");
        }
        if (entry.size() != 3) fail(Errc::MalformedHeader, "tensor '" + key + "' has unexpected fields");
        if (!entry["dtype"].is_string()) fail(Errc::MalformedHeader, "tensor '" + key + "': dtype is not a string");
        const auto dtype_str = entry["dtype"].get<std::string>();
        const auto dtype = parse_dtype(dtype_str);
        if (!dtype) fail(Errc::UnknownDtype, "tensor '" + key + "' has dtype '" + dtype_str + "'");
        Shape shape = parse_shape(entry["shape"], key);
        const json& offs = entry["data_offsets"];
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() || !offs[1].is_number_unsigned()) {
            fail(Errc::MalformedHeader, "tensor '" + key + "': data_offsets must be two non-negative integers");
        }
        const auto begin = offs[0].get<std::uint64_t>();
        const auto end = offs[1].get<std::uint64_t>();
        if (begin > end || end > buffer.size()) {
            fail(Errc::OffsetOverlap, "tensor '" + key + "': data region [" + std::to_string(begin) + ", " +
                                          std::to_string(end) + ") exceeds the " + std::to_string(buffer.size()) +
                                          "-byte data buffer");
        }
        const auto n = checked_numel(shape);
        if (!n || *n > (end - begin) || *n * dtype_width(*dtype) != end - begin) {
            fail(Errc::MalformedHeader, "tensor '" + key + "': data region of " + std::to_string(end - begin) +
                                            " bytes does not match its shape and dtype");
        }
        regions.push_back({begin, end, key});
        std::vector<std::byte> data(buffer.begin() + static_cast<std::ptrdiff_t>(begin),
                                    buffer.begin() + static_cast<std::ptrdiff_t>(end));
        map.insert(Tensor(key, *dtype, std::move(shape), std::move(data)));
    }

    std::sort(regions.begin(), regions.end(), [](const Region& a, const Region& b) {
        return a.begin != b.begin ? a.begin < b.begin : a.end < b.end;
    });
    std::uint64_t cursor = 0;
    for (const Region& r : regions) {
        if (r.begin < cursor) {
            fail(Errc::OffsetOverlap, "tensor '" + r.name + "' at offset " + std::to_string(r.begin) +
                                          " overlaps the previous data region");
        }
        if (r.begin > cursor) {
            fail(Errc::MalformedHeader, "gap in data buffer before tensor '" + r.name + "' at offset " +
                                            std::to_string(r.begin));
        }
        cursor = r.end;
    }
    if (cursor != buffer.size()) {
        fail(Errc::MalformedHeader, std::to_string(buffer.size() - cursor) + " trailing bytes after offset " +
                                        std::to_string(cursor));
    }
    return map;
}

std::vector<std::byte> serialize_container(const TensorMap& map) {
    json header = json::object();
    if (!map.metadata().empty()) {
        json meta = json::object();
        for (const auto& [k, v] : map.metadata()) meta[k] = v;
        header[std::string(kMetadataKey)] = std::move(meta);
    }
    std::uint64_t offset = 0;
    for (const auto& [name, t] : map.tensors()) {
        const std::uint64_t end = offset + t.bytes().size();
        header[name] = {{"dtype", dtype_name(t.dtype())}, {"shape", t.shape()}, {"data_offsets", {offset, end}}};
        offset = end;
    }
    std::string text = header.dump();
    text.append((8 - text.size() % 8) % 8, ' ');

    std::vector<std::byte> out(8 + text.size() + offset);
    store(out.data(), static_cast<std::uint64_t>(text.size()));
    std::memcpy(out.data() + 8, text.data(), text.size());
    std::byte* p = out.data() + 8 + text.size();
    for (const auto& [name, t] : map.tensors()) {
        if (!t.bytes().empty()) std::memcpy(p, t.bytes().data(), t.bytes().size());
        p += t.bytes().size();
    }
    return out;
}

TensorMap read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::IoFailure, "cannot open '" + path.string() + "'");
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) fail(Errc::IoFailure, "read error on '" + path.string() + "'");
    return parse_container(std::as_bytes(std::span<const char>(raw)));
}

void write_container(const std::filesystem::path& path, const TensorMap& map) {
    const std::vector<std::byte> bytes = serialize_container(map);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::IoFailure, "cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) fail(Errc::IoFailure, "write error on '" + path.string() + "'");
}

} // namespace lorablend
