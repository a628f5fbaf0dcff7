#include "urbanet/unet.hpp"

#include <cblas.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <random>
#include <set>

#include "urbanet/error.hpp"

namespace urbanet {

namespace {

// Row-major C = alpha * op(A) * op(B) + beta * C.
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float beta,
          float* c) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), 1.0f, a, static_cast<int>(ta ? m : k), b,
                static_cast<int>(tb ? k : n), beta, c, static_cast<int>(n));
}

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double beta, double* c) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
                static_cast<int>(n), static_cast<int>(k), 1.0, a, static_cast<int>(ta ? m : k), b,
                static_cast<int>(tb ? k : n), beta, c, static_cast<int>(n));
}

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

std::string level_name(std::size_t k) { return "level" + std::to_string(k); }

// col is (cin*k*k) x (res*res): row (ci, ki, kj) holds the input shifted by
// (ki - k/2, kj - k/2) with zeros outside. A shift is one flat copy of the
// plane followed by zeroing the column that wrapped across a row boundary.
template <class T>
void im2col(const T* in, std::size_t cin, std::size_t res, std::size_t k, T* col) {
    const auto p = static_cast<std::ptrdiff_t>(k / 2);
    const auto r = static_cast<std::ptrdiff_t>(res);
    const std::size_t hw = res * res;
    for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* plane = in + ci * hw;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                T* dst = col + ((ci * k + ki) * k + kj) * hw;
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki) - p;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kj) - p;
                const std::ptrdiff_t y_lo = std::clamp<std::ptrdiff_t>(-dy, 0, r);
                const std::ptrdiff_t y_hi = std::clamp<std::ptrdiff_t>(r - dy, 0, r);
                if (y_lo >= y_hi || dx <= -r || dx >= r) {
                    std::memset(dst, 0, hw * sizeof(T));
                    continue;
                }
                std::memset(dst, 0, static_cast<std::size_t>(y_lo * r) * sizeof(T));
                std::memset(dst + y_hi * r, 0, static_cast<std::size_t>((r - y_hi) * r) * sizeof(T));
                // Flat range of destination indices whose source lies inside the plane.
                std::ptrdiff_t d_lo = y_lo * r;
                std::ptrdiff_t d_hi = y_hi * r;
                const std::ptrdiff_t shift = dy * r + dx;
                if (dx < 0) {
                    std::memset(dst + d_lo, 0, static_cast<std::size_t>(-dx) * sizeof(T));
                    d_lo -= dx;
                } else if (dx > 0) {
                    std::memset(dst + d_hi - dx, 0, static_cast<std::size_t>(dx) * sizeof(T));
                    d_hi -= dx;
                }
                if (d_lo < d_hi) std::memcpy(dst + d_lo, plane + d_lo + shift, static_cast<std::size_t>(d_hi - d_lo) * sizeof(T));
                if (dx > 0) {
                    for (std::ptrdiff_t y = y_lo; y < y_hi; ++y) {
                        for (std::ptrdiff_t x = r - dx; x < r; ++x) dst[y * r + x] = T(0);
                    }
                } else if (dx < 0) {
                    for (std::ptrdiff_t y = y_lo; y < y_hi; ++y) {
                        for (std::ptrdiff_t x = 0; x < -dx; ++x) dst[y * r + x] = T(0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col. Clobbers the wrapped columns of `col`.
template <class T>
void col2im(T* col, std::size_t cin, std::size_t res, std::size_t k, T* d_in) {
    const auto p = static_cast<std::ptrdiff_t>(k / 2);
    const auto r = static_cast<std::ptrdiff_t>(res);
    const std::size_t hw = res * res;
    std::memset(d_in, 0, cin * hw * sizeof(T));
    for (std::size_t ci = 0; ci < cin; ++ci) {
        T* plane = d_in + ci * hw;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                T* src = col + ((ci * k + ki) * k + kj) * hw;
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ki) - p;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kj) - p;
                const std::ptrdiff_t y_lo = std::clamp<std::ptrdiff_t>(-dy, 0, r);
                const std::ptrdiff_t y_hi = std::clamp<std::ptrdiff_t>(r - dy, 0, r);
                if (y_lo >= y_hi || dx <= -r || dx >= r) continue;
                for (std::ptrdiff_t y = y_lo; y < y_hi; ++y) {
                    if (dx > 0) {
                        for (std::ptrdiff_t x = r - dx; x < r; ++x) src[y * r + x] = T(0);
                    } else {
                        for (std::ptrdiff_t x = 0; x < -dx; ++x) src[y * r + x] = T(0);
                    }
                }
                std::ptrdiff_t d_lo = y_lo * r;
                std::ptrdiff_t d_hi = y_hi * r;
                if (dx < 0) d_lo -= dx;
                if (dx > 0) d_hi -= dx;
                const std::ptrdiff_t shift = dy * r + dx;
                T* dst = plane + shift;
                for (std::ptrdiff_t i = d_lo; i < d_hi; ++i) dst[i] += src[i];
            }
        }
    }
}

// 2x2 max pooling; arg holds the winning input index within each plane.
template <class T>
void max_pool(const T* in, std::size_t planes, std::size_t res, T* out, std::uint32_t* arg) {
    const std::size_t half = res / 2;
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = in + p * res * res;
        T* dst = out + p * half * half;
        std::uint32_t* a = arg + p * half * half;
        for (std::size_t y = 0; y < half; ++y) {
            for (std::size_t x = 0; x < half; ++x) {
                std::size_t best = (2 * y) * res + 2 * x;
                for (std::size_t idx : {best + 1, best + res, best + res + 1}) {
                    if (src[idx] > src[best]) best = idx;
                }
                dst[y * half + x] = src[best];
                a[y * half + x] = static_cast<std::uint32_t>(best);
            }
        }
    }
}

template <class T>
void max_pool_backward(const T* d_out, const std::uint32_t* arg, std::size_t planes, std::size_t res, T* d_in) {
    const std::size_t half = res / 2;
    std::fill(d_in, d_in + planes * res * res, T(0));
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < half * half; ++i) {
            d_in[p * res * res + arg[p * half * half + i]] += d_out[p * half * half + i];
        }
    }
}

// Nearest-neighbour 2x upsampling from res to 2*res.
template <class T>
void upsample(const T* in, std::size_t planes, std::size_t res, T* out) {
    const std::size_t big = res * 2;
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = in + p * res * res;
        T* dst = out + p * big * big;
        for (std::size_t y = 0; y < res; ++y) {
            T* row = dst + 2 * y * big;
            for (std::size_t x = 0; x < res; ++x) row[2 * x] = row[2 * x + 1] = src[y * res + x];
            std::copy_n(row, big, row + big);
        }
    }
}

template <class T>
void upsample_backward(const T* d_out, std::size_t planes, std::size_t res, T* d_in) {
    const std::size_t big = res * 2;
        for (std::size_t p = 0; p < planes; ++p) {
        const T* src = d_out + p * big * big;
        T* dst = d_in + p * res * res;
        for (std::size_t y = 0; y < res; ++y) {
            const T* a = src + 2 * y * big;
            const T* b = a + big;
            for (std::size_t x = 0; x < res; ++x) {
                dst[y * res + x] = (a[2 * x] + a[2 * x + 1]) + (b[2 * x] + b[2 * x + 1]);
            }
        }
    }
}

// Per-thread buffers reused across calls; slot numbers keep concurrent users apart.
template <class T>
T* scratch(std::size_t slot, std::size_t n) {
    thread_local std::array<std::vector<T>, 2> bufs;
    auto& b = bufs[slot];
    if (b.size() < n) b.resize(n);
    return b.data();
}

template <class T>
void check_finite(const T* data, std::size_t n, const char* stage, const std::string& layer) {
    // x * 0 is NaN exactly when x is NaN or infinite; summing in lanes lets the loop vectorize.
    T acc[8] = {};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        for (std::size_t l = 0; l < 8; ++l) acc[l] += data[i + l] * T(0);
    }
    for (; i < n; ++i) acc[0] += data[i] * T(0);
    T total = T(0);
    for (T a : acc) total += a;
    if (total != T(0)) throw NumericError(std::string("non-finite value in ") + stage + " of " + layer);
}

template <class T>
std::uint64_t hash_positive(const std::vector<T>& v, std::uint64_t h) {
    for (const T x : v) {
        const unsigned char bit = x > T(0) ? 1 : 0;
        h = fnv1a(&bit, 1, h);
    }
    return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// UNetSpec

void UNetSpec::validate() const {
    if (input_channels == 0) throw SpecError("input_channels must be positive");
    if (base_features == 0) throw SpecError("base_features must be positive");
    if (depth == 0) throw SpecError("depth must be at least 1");
    if (depth > 8) throw SpecError("depth too large");
    if (kernel_size == 0 || kernel_size % 2 == 0) throw SpecError("kernel_size must be odd");
    if (tile_size == 0) throw SpecError("tile_size must be positive");
    const std::size_t m = std::size_t{1} << depth;
    if (!auto_pad && tile_size % m != 0) {
        throw SpecError("tile_size " + std::to_string(tile_size) + " is not divisible by 2^depth = " +
                        std::to_string(m));
    }
    if (heads.empty()) throw SpecError("at least one head required");
    std::set<std::string> names;
    for (const auto& h : heads) {
        if (h.name.empty() || h.name.find('.') != std::string::npos) {
            throw SpecError("head names must be non-empty and contain no '.'");
        }
        if (h.output_channels == 0) throw SpecError("head '" + h.name + "' needs at least one output channel");
        if (!names.insert(h.name).second) throw SpecError("duplicate head name '" + h.name + "'");
    }
}

std::size_t UNetSpec::padded_size() const {
    const std::size_t m = std::size_t{1} << depth;
    if (!auto_pad) return tile_size;
    return (tile_size + m - 1) / m * m;
}

std::size_t UNetSpec::output_channels() const {
    std::size_t n = 0;
    for (const auto& h : heads) n += h.output_channels;
    return n;
}

UNetSpec UNetSpec::desk_scale(std::size_t tile_size) {
    UNetSpec s;
    s.tile_size = tile_size;
    return s;
}

UNetSpec UNetSpec::full_scale(std::size_t tile_size) {
    UNetSpec s;
    s.base_features = 32;
    s.depth = 3;
    s.tile_size = tile_size;
    return s;
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
std::size_t ParamSet<T>::index_of(std::string_view name) const {
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        if (arrays[i].name == name) return i;
    }
    throw SpecError("no parameter array named '" + std::string(name) + "'");
}

template <class T>
std::size_t ParamSet<T>::count() const {
    std::size_t n = 0;
    for (const auto& a : arrays) n += a.values.size();
    return n;
}

template <class T>
void ParamSet<T>::set_zero() {
    for (auto& a : arrays) std::fill(a.values.begin(), a.values.end(), T(0));
}

template <class T>
ParamSet<T> ParamSet<T>::zeros_like() const {
    ParamSet out = *this;
    out.set_zero();
    return out;
}

template class ParamSet<float>;
template class ParamSet<double>;

std::string param_group(std::string_view name) {
    if (name.starts_with("encoder.")) return "encoder";
    if (name.starts_with("decoder.")) {
        const auto dot = name.find('.', 8);
        return std::string(name.substr(0, dot));
    }
    return std::string(name);
}

std::vector<std::pair<std::string, std::vector<std::size_t>>> param_layout(const UNetSpec& spec) {
    spec.validate();
    const std::size_t k = spec.kernel_size;
    std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
    auto add_conv = [&](const std::string& name, std::size_t cin, std::size_t cout, std::size_t ks) {
        out.push_back({name + ".weight", {cout, cin, ks, ks}});
        out.push_back({name + ".bias", {cout}});
    };
    for (std::size_t lvl = 0; lvl < spec.depth; ++lvl) {
        const std::size_t cin = lvl == 0 ? spec.input_channels : spec.features(lvl - 1);
        add_conv("encoder." + level_name(lvl) + ".conv1", cin, spec.features(lvl), k);
        add_conv("encoder." + level_name(lvl) + ".conv2", spec.features(lvl), spec.features(lvl), k);
    }
    add_conv("encoder.bottleneck.conv1", spec.features(spec.depth - 1), spec.features(spec.depth), k);
    add_conv("encoder.bottleneck.conv2", spec.features(spec.depth), spec.features(spec.depth), k);
    for (const auto& head : spec.heads) {
        const std::string prefix = "decoder." + head.name + ".";
        for (std::size_t lvl = spec.depth; lvl-- > 0;) {
            const std::size_t f = spec.features(lvl);
            add_conv(prefix + level_name(lvl) + ".up", spec.features(lvl + 1), f, k);
            add_conv(prefix + level_name(lvl) + ".conv1", 2 * f, f, k);
            add_conv(prefix + level_name(lvl) + ".conv2", f, f, k);
        }
        add_conv(prefix + "out", spec.features(0), head.output_channels, 1);
    }
    return out;
}

UNetParams init_params(const UNetSpec& spec, std::uint64_t seed) {
    UNetParams params;
    for (auto& [name, dims] : param_layout(spec)) {
        const std::size_t n = std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
        std::vector<float> values(n, 0.0f);
        if (dims.size() == 4) {
            const double fan_in = static_cast<double>(dims[1] * dims[2] * dims[3]);
            std::mt19937_64 rng(fnv1a(name.data(), name.size(), seed * kFnvPrime + kFnvOffset));
            std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
            for (auto& v : values) v = static_cast<float>(normal(rng));
        }
        params.arrays.push_back({std::move(name), std::move(dims), std::move(values)});
    }
    return params;
}

template <class T>
void check_params(const UNetSpec& spec, const ParamSet<T>& params) {
    const auto layout = param_layout(spec);
    if (layout.size() != params.arrays.size()) {
        throw SpecError("parameter set has " + std::to_string(params.arrays.size()) + " arrays, spec expects " +
                        std::to_string(layout.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& a = params.arrays[i];
        if (a.name != layout[i].first || a.dims != layout[i].second) {
            throw SpecError("parameter array '" + a.name + "' does not match spec entry '" + layout[i].first + "'");
        }
        const std::size_t n =
            std::accumulate(a.dims.begin(), a.dims.end(), std::size_t{1}, std::multiplies<>());
        if (a.values.size() != n) throw SpecError("parameter array '" + a.name + "' has the wrong element count");
        for (const T v : a.values) {
            if (!std::isfinite(v)) throw NumericError("parameter array '" + a.name + "' holds a non-finite value");
        }
    }
}

template void check_params<float>(const UNetSpec&, const ParamSet<float>&);
template void check_params<double>(const UNetSpec&, const ParamSet<double>&);

std::uint64_t params_hash(const UNetParams& params, std::string_view group) {
    std::uint64_t h = kFnvOffset;
    for (const auto& a : params.arrays) {
        if (!group.empty() && param_group(a.name) != group) continue;
        h = fnv1a(a.name.data(), a.name.size(), h);
        h = fnv1a(a.values.data(), a.values.size() * sizeof(float), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Loss

template <class T>
void Batch<T>::resize(std::size_t n_, std::size_t cin, std::size_t ct, std::size_t s) {
    n = n_;
    input_channels = cin;
    target_channels = ct;
    size = s;
    inputs.assign(n * cin * s * s, T(0));
    targets.assign(n * ct * s * s, T(0));
    masks.assign(n * s * s, T(0));
}

template struct Batch<float>;
template struct Batch<double>;

namespace {

std::vector<double> normalized_weights(std::span<const double> w, std::size_t channels) {
    std::vector<double> out(channels, 1.0);
    if (!w.empty()) {
        if (w.size() != channels) throw ShapeError("channel weight count does not match target channels");
        out.assign(w.begin(), w.end());
    }
    double total = 0.0;
    for (double v : out) {
        if (v < 0.0 || !std::isfinite(v)) throw PreconditionError("channel weights must be finite and non-negative");
        total += v;
    }
    if (total <= 0.0) throw PreconditionError("channel weights sum to zero");
    for (double& v : out) v /= total;
    return out;
}

template <class T>
void check_loss_shapes(std::size_t pred, std::size_t target, std::size_t mask, std::size_t n, std::size_t channels,
                       std::size_t size) {
    const std::size_t plane = size * size;
    if (pred != n * channels * plane || target != pred || mask != n * plane) {
        throw ShapeError("masked_mse: prediction, target and mask shapes disagree");
    }
}

}  // namespace

template <class T>
double masked_mse(std::span<const T> pred, std::span<const T> target, std::span<const T> mask, std::size_t n,
                  std::size_t channels, std::size_t size, std::span<const double> channel_weights) {
    check_loss_shapes<T>(pred.size(), target.size(), mask.size(), n, channels, size);
    if (n == 0) throw ShapeError("masked_mse: empty batch");
    const auto w = normalized_weights(channel_weights, channels);
    const std::size_t plane = size * size;
    double total = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        const T* m = mask.data() + s * plane;
        double valid = 0.0;
        for (std::size_t i = 0; i < plane; ++i) valid += static_cast<double>(m[i]);
        if (valid == 0.0) throw PreconditionError("masked_mse: sample " + std::to_string(s) + " is all water");
        double sample = 0.0;
        for (std::size_t c = 0; c < channels; ++c) {
            if (w[c] == 0.0) continue;
            const T* p = pred.data() + (s * channels + c) * plane;
            const T* y = target.data() + (s * channels + c) * plane;
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
                if (m[i] == T(0)) continue;
                const double e = static_cast<double>(y[i]) - static_cast<double>(p[i]);
                acc += static_cast<double>(m[i]) * e * e;
            }
            sample += w[c] * (acc / valid);
        }
        total += sample;
    }
    return total / static_cast<double>(n);
}

template <class T>
void masked_mse_grad(std::span<const T> pred, std::span<const T> target, std::span<const T> mask, std::size_t n,
                     std::size_t channels, std::size_t size, std::span<T> grad,
                     std::span<const double> channel_weights) {
    check_loss_shapes<T>(pred.size(), target.size(), mask.size(), n, channels, size);
    if (grad.size() != pred.size()) throw ShapeError("masked_mse_grad: gradient buffer has the wrong size");
    const auto w = normalized_weights(channel_weights, channels);
    const std::size_t plane = size * size;
    for (std::size_t s = 0; s < n; ++s) {
        const T* m = mask.data() + s * plane;
        double valid = 0.0;
        for (std::size_t i = 0; i < plane; ++i) valid += static_cast<double>(m[i]);
        if (valid == 0.0) throw PreconditionError("masked_mse: sample " + std::to_string(s) + " is all water");
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t off = (s * channels + c) * plane;
            const double scale = 2.0 * w[c] / (valid * static_cast<double>(n));
            for (std::size_t i = 0; i < plane; ++i) {
                if (m[i] == T(0)) {
                    grad[off + i] = T(0);
                    continue;
                }
                const double e = static_cast<double>(pred[off + i]) - static_cast<double>(target[off + i]);
                grad[off + i] = static_cast<T>(scale * static_cast<double>(m[i]) * e);
            }
        }
    }
}

template double masked_mse<float>(std::span<const float>, std::span<const float>, std::span<const float>,
                                  std::size_t, std::size_t, std::size_t, std::span<const double>);
template double masked_mse<double>(std::span<const double>, std::span<const double>, std::span<const double>,
                                   std::size_t, std::size_t, std::size_t, std::span<const double>);
template void masked_mse_grad<float>(std::span<const float>, std::span<const float>, std::span<const float>,
                                     std::size_t, std::size_t, std::size_t, std::span<float>, std::span<const double>);
template void masked_mse_grad<double>(std::span<const double>, std::span<const double>, std::span<const double>,
                                      std::size_t, std::size_t, std::size_t, std::span<double>,
                                      std::span<const double>);

// ---------------------------------------------------------------------------
// Network

template <class T>
UNet<T>::UNet(UNetSpec spec, ParamSet<T> params) : spec_(std::move(spec)), params_(std::move(params)) {
    check_params(spec_, params_);
    const std::size_t k = spec_.kernel_size;
    for (std::size_t lvl = 0; lvl < spec_.depth; ++lvl) {
        const std::size_t cin = lvl == 0 ? spec_.input_channels : spec_.features(lvl - 1);
        const std::string p = "encoder." + level_name(lvl);
        encoder_.push_back({conv(p + ".conv1", cin, spec_.features(lvl), k),
                            conv(p + ".conv2", spec_.features(lvl), spec_.features(lvl), k)});
    }
    const std::size_t fb = spec_.features(spec_.depth);
    bottleneck_ = {conv("encoder.bottleneck.conv1", spec_.features(spec_.depth - 1), fb, k),
                   conv("encoder.bottleneck.conv2", fb, fb, k)};
    for (const auto& head : spec_.heads) {
        Decoder d;
        d.levels.resize(spec_.depth);
        const std::string p = "decoder." + head.name + ".";
        for (std::size_t lvl = 0; lvl < spec_.depth; ++lvl) {
            const std::size_t f = spec_.features(lvl);
            d.levels[lvl] = {conv(p + level_name(lvl) + ".up", spec_.features(lvl + 1), f, k),
                             conv(p + level_name(lvl) + ".conv1", 2 * f, f, k),
                             conv(p + level_name(lvl) + ".conv2", f, f, k)};
        }
        d.out = conv(p + "out", spec_.features(0), head.output_channels, 1);
        decoders_.push_back(std::move(d));
    }
}

template <class T>
typename UNet<T>::Conv UNet<T>::conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) const {
    return {name, params_.index_of(name + ".weight"), params_.index_of(name + ".bias"), cin, cout, k};
}

template <class T>
std::size_t UNet<T>::head_offset(std::size_t head) const {
    std::size_t off = 0;
    for (std::size_t h = 0; h < head; ++h) off += spec_.heads[h].output_channels;
    return off;
}

template <class T>
void UNet<T>::conv_forward(const Conv& c, const T* in, std::size_t n, std::size_t res, T* out, bool relu) const {
    const std::size_t hw = res * res;
    const std::size_t kk = c.cin * c.k * c.k;
    const T* weight = params_.arrays[c.weight].values.data();
    const T* bias = params_.arrays[c.bias].values.data();
    T* col = c.k == 1 ? nullptr : scratch<T>(0, kk * hw);
    for (std::size_t s = 0; s < n; ++s) {
        const T* src = in + s * c.cin * hw;
        if (col) {
            im2col(src, c.cin, res, c.k, col);
            src = col;
        }
        gemm(false, false, c.cout, hw, kk, weight, src, T(0), out + s * c.cout * hw);
        for (std::size_t o = 0; o < c.cout; ++o) {
            T* row = out + (s * c.cout + o) * hw;
            const T b = bias[o];
            if (relu) {
                for (std::size_t i = 0; i < hw; ++i) row[i] = std::max(row[i] + b, T(0));
            } else {
                for (std::size_t i = 0; i < hw; ++i) row[i] += b;
            }
        }
    }
    check_finite(out, n * c.cout * hw, "forward", c.name);
}

template <class T>
void UNet<T>::conv_backward(const Conv& c, const T* in, const T* out, std::size_t n, std::size_t res,
                            std::vector<T>& d_out, bool relu, ParamSet<T>* grads, T* d_in) const {
    const std::size_t hw = res * res;
    const std::size_t kk = c.cin * c.k * c.k;
    if (relu) {
        for (std::size_t i = 0; i < n * c.cout * hw; ++i) {
            if (!(out[i] > T(0))) d_out[i] = T(0);
        }
    }
    check_finite(d_out.data(), n * c.cout * hw, "backward", c.name);
    if (!grads && !d_in) return;

    const T* weight = params_.arrays[c.weight].values.data();
    T* d_weight = grads ? grads->arrays[c.weight].values.data() : nullptr;
    T* d_bias = grads ? grads->arrays[c.bias].values.data() : nullptr;
    T* col = c.k == 1 || !grads ? nullptr : scratch<T>(0, kk * hw);
    T* d_col = c.k == 1 || !d_in ? nullptr : scratch<T>(1, kk * hw);
    for (std::size_t s = 0; s < n; ++s) {
        const T* g = d_out.data() + s * c.cout * hw;
        const T* src = in + s * c.cin * hw;
        if (grads) {
            if (col) {
                im2col(src, c.cin, res, c.k, col);
                src = col;
            }
            gemm(false, true, c.cout, kk, hw, g, src, T(1), d_weight);
            for (std::size_t o = 0; o < c.cout; ++o) {
                const T* row = d_out.data() + (s * c.cout + o) * hw;
                T acc = T(0);
                for (std::size_t i = 0; i < hw; ++i) acc += row[i];
                d_bias[o] += acc;
            }
        }
        if (d_in) {
            T* dst = d_in + s * c.cin * hw;
            if (c.k == 1) {
                gemm(true, false, kk, hw, c.cout, weight, g, T(0), dst);
            } else {
                gemm(true, false, kk, hw, c.cout, weight, g, T(0), d_col);
                col2im(d_col, c.cin, res, c.k, dst);
            }
        }
    }
}

template <class T>
std::vector<T> UNet<T>::forward(std::span<const T> inputs, std::size_t n) const {
    Cache cache;
    return forward(inputs, n, cache);
}

template <class T>
std::vector<T> UNet<T>::forward(std::span<const T> inputs, std::size_t n, Cache& cache,
                                const std::vector<bool>* active_heads) const {
    const std::size_t s = spec_.tile_size;
    const std::size_t cin = spec_.input_channels;
    if (inputs.size() != n * cin * s * s) {
        throw ShapeError("forward: expected " + std::to_string(n) + " x " + std::to_string(cin) + " x " +
                         std::to_string(s) + " x " + std::to_string(s) + " inputs, got " +
                         std::to_string(inputs.size()) + " values");
    }
    if (active_heads && active_heads->size() != spec_.heads.size()) throw ShapeError("forward: head mask size");

    const std::size_t P = spec_.padded_size();
    const std::size_t lo = (P - s) / 2;
    cache.n = n;
    cache.active = active_heads ? *active_heads : std::vector<bool>(spec_.heads.size(), true);

    // Centered zero padding up to P x P.
    cache.input.assign(n * cin * P * P, T(0));
    for (std::size_t p = 0; p < n * cin; ++p) {
        for (std::size_t y = 0; y < s; ++y) {
            std::copy_n(inputs.data() + (p * s + y) * s, s, cache.input.data() + (p * P + y + lo) * P + lo);
        }
    }

    const std::size_t depth = spec_.depth;
    cache.enc_a.resize(depth);
    cache.enc_skip.resize(depth);
    cache.pooled.resize(depth);
    cache.pool_arg.resize(depth);
    const T* x = cache.input.data();
    for (std::size_t lvl = 0; lvl < depth; ++lvl) {
        const std::size_t res = P >> lvl;
        const std::size_t f = spec_.features(lvl);
        cache.enc_a[lvl].resize(n * f * res * res);
        cache.enc_skip[lvl].resize(n * f * res * res);
        conv_forward(encoder_[lvl].conv1, x, n, res, cache.enc_a[lvl].data(), true);
        conv_forward(encoder_[lvl].conv2, cache.enc_a[lvl].data(), n, res, cache.enc_skip[lvl].data(), true);
        cache.pooled[lvl].resize(n * f * (res / 2) * (res / 2));
        cache.pool_arg[lvl].resize(cache.pooled[lvl].size());
        max_pool(cache.enc_skip[lvl].data(), n * f, res, cache.pooled[lvl].data(), cache.pool_arg[lvl].data());
        x = cache.pooled[lvl].data();
    }
    const std::size_t rb = P >> depth;
    const std::size_t fb = spec_.features(depth);
    cache.bott_a.resize(n * fb * rb * rb);
    cache.bott_b.resize(n * fb * rb * rb);
    conv_forward(bottleneck_.conv1, x, n, rb, cache.bott_a.data(), true);
    conv_forward(bottleneck_.conv2, cache.bott_a.data(), n, rb, cache.bott_b.data(), true);

    const std::size_t ct = spec_.output_channels();
    std::vector<T> outputs(n * ct * s * s, T(0));
    cache.heads.resize(spec_.heads.size());
    for (std::size_t h = 0; h < spec_.heads.size(); ++h) {
        if (!cache.active[h]) continue;
        const Decoder& dec = decoders_[h];
        HeadCache& hc = cache.heads[h];
        hc.up_in.resize(depth);
        hc.up_out.resize(depth);
        hc.cat.resize(depth);
        hc.conv_a.resize(depth);
        hc.conv_b.resize(depth);
        const T* y = cache.bott_b.data();
        for (std::size_t lvl = depth; lvl-- > 0;) {
            const std::size_t res = P >> lvl;
            const std::size_t f = spec_.features(lvl);
            const std::size_t fin = spec_.features(lvl + 1);
            const std::size_t hw = res * res;
            hc.up_in[lvl].resize(n * fin * hw);
            upsample(y, n * fin, res / 2, hc.up_in[lvl].data());
            hc.up_out[lvl].resize(n * f * hw);
            conv_forward(dec.levels[lvl].up, hc.up_in[lvl].data(), n, res, hc.up_out[lvl].data(), true);
            hc.cat[lvl].resize(n * 2 * f * hw);
            for (std::size_t i = 0; i < n; ++i) {
                std::copy_n(hc.up_out[lvl].data() + i * f * hw, f * hw, hc.cat[lvl].data() + i * 2 * f * hw);
                std::copy_n(cache.enc_skip[lvl].data() + i * f * hw, f * hw,
                            hc.cat[lvl].data() + (i * 2 + 1) * f * hw);
            }
            hc.conv_a[lvl].resize(n * f * hw);
            hc.conv_b[lvl].resize(n * f * hw);
            conv_forward(dec.levels[lvl].conv1, hc.cat[lvl].data(), n, res, hc.conv_a[lvl].data(), true);
            conv_forward(dec.levels[lvl].conv2, hc.conv_a[lvl].data(), n, res, hc.conv_b[lvl].data(), true);
            y = hc.conv_b[lvl].data();
        }
        const std::size_t oc = spec_.heads[h].output_channels;
        hc.out.resize(n * oc * P * P);
        conv_forward(dec.out, y, n, P, hc.out.data(), false);

        const std::size_t off = head_offset(h);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < oc; ++c) {
                for (std::size_t r = 0; r < s; ++r) {
                    std::copy_n(hc.out.data() + ((i * oc + c) * P + r + lo) * P + lo, s,
                                outputs.data() + ((i * ct + off + c) * s + r) * s);
                }
            }
        }
    }
    return outputs;
}

template <class T>
void UNet<T>::backward(const Cache& cache, std::span<const T> d_outputs, ParamSet<T>& grads,
                       const std::vector<bool>* trainable) const {
    const std::size_t n = cache.n;
    const std::size_t s = spec_.tile_size;
    const std::size_t ct = spec_.output_channels();
    if (d_outputs.size() != n * ct * s * s) throw ShapeError("backward: gradient shape does not match outputs");
    if (trainable && trainable->size() != params_.arrays.size()) throw ShapeError("backward: trainable mask size");

    auto wants = [&](const Conv& c) { return !trainable || (*trainable)[c.weight] || (*trainable)[c.bias]; };
    auto grad_target = [&](const Conv& c) -> ParamSet<T>* { return wants(c) ? &grads : nullptr; };

    bool encoder_trainable = false;
    for (std::size_t i = 0; i < params_.arrays.size(); ++i) {
        if (param_group(params_.arrays[i].name) == "encoder" && (!trainable || (*trainable)[i])) {
            encoder_trainable = true;
        }
    }

    const std::size_t P = spec_.padded_size();
    const std::size_t lo = (P - s) / 2;
    const std::size_t depth = spec_.depth;
    thread_local std::vector<std::vector<T>> d_skip;
    thread_local std::vector<T> d_bott, d_out, d_y, d_a, d_cat, d_up, d_up_in, d_x, d_s;
    d_skip.resize(depth);
    for (std::size_t lvl = 0; lvl < depth; ++lvl) d_skip[lvl].assign(cache.enc_skip[lvl].size(), T(0));
    d_bott.assign(cache.bott_b.size(), T(0));

    for (std::size_t h = 0; h < spec_.heads.size(); ++h) {
        if (!cache.active[h]) continue;
        const Decoder& dec = decoders_[h];
        const HeadCache& hc = cache.heads[h];
        const std::size_t oc = spec_.heads[h].output_channels;
        const std::size_t off = head_offset(h);

        d_out.assign(n * oc * P * P, T(0));
        bool any = false;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < oc; ++c) {
                for (std::size_t r = 0; r < s; ++r) {
                    const T* src = d_outputs.data() + ((i * ct + off + c) * s + r) * s;
                    std::copy_n(src, s, d_out.data() + ((i * oc + c) * P + r + lo) * P + lo);
                    for (std::size_t j = 0; j < s && !any; ++j) any = src[j] != T(0);
                }
            }
        }
        if (!any) continue;

        const std::size_t f0 = spec_.features(0);
        d_y.resize(n * f0 * P * P);
        conv_backward(dec.out, hc.conv_b[0].data(), hc.out.data(), n, P, d_out, false, grad_target(dec.out),
                      d_y.data());
        for (std::size_t lvl = 0; lvl < depth; ++lvl) {
            const std::size_t res = P >> lvl;
            const std::size_t hw = res * res;
            const std::size_t f = spec_.features(lvl);
            const std::size_t fin = spec_.features(lvl + 1);
            const auto& L = dec.levels[lvl];
            d_a.resize(n * f * hw);
            conv_backward(L.conv2, hc.conv_a[lvl].data(), hc.conv_b[lvl].data(), n, res, d_y, true,
                          grad_target(L.conv2), d_a.data());
            d_cat.resize(n * 2 * f * hw);
            conv_backward(L.conv1, hc.cat[lvl].data(), hc.conv_a[lvl].data(), n, res, d_a, true,
                          grad_target(L.conv1), d_cat.data());
            d_up.resize(n * f * hw);
            for (std::size_t i = 0; i < n; ++i) {
                std::copy_n(d_cat.data() + i * 2 * f * hw, f * hw, d_up.data() + i * f * hw);
                const T* sk = d_cat.data() + (i * 2 + 1) * f * hw;
                T* acc = d_skip[lvl].data() + i * f * hw;
                for (std::size_t j = 0; j < f * hw; ++j) acc[j] += sk[j];
            }
            d_up_in.resize(n * fin * hw);
            conv_backward(L.up, hc.up_in[lvl].data(), hc.up_out[lvl].data(), n, res, d_up, true, grad_target(L.up),
                          d_up_in.data());
            d_y.assign(n * fin * (hw / 4), T(0));
            upsample_backward(d_up_in.data(), n * fin, res / 2, d_y.data());
        }
        for (std::size_t j = 0; j < d_bott.size(); ++j) d_bott[j] += d_y[j];
    }

    if (!encoder_trainable) return;

    const std::size_t rb = P >> depth;
    const std::size_t fb = spec_.features(depth);
    d_a.resize(n * fb * rb * rb);
    conv_backward(bottleneck_.conv2, cache.bott_a.data(), cache.bott_b.data(), n, rb, d_bott, true,
                  grad_target(bottleneck_.conv2), d_a.data());
    d_x.resize(cache.pooled[depth - 1].size());
    conv_backward(bottleneck_.conv1, cache.pooled[depth - 1].data(), cache.bott_a.data(), n, rb, d_a, true,
                  grad_target(bottleneck_.conv1), d_x.data());
    for (std::size_t lvl = depth; lvl-- > 0;) {
        const std::size_t res = P >> lvl;
        const std::size_t f = spec_.features(lvl);
        d_s.resize(n * f * res * res);
        max_pool_backward(d_x.data(), cache.pool_arg[lvl].data(), n * f, res, d_s.data());
        for (std::size_t j = 0; j < d_s.size(); ++j) d_s[j] += d_skip[lvl][j];
        d_a.resize(n * f * res * res);
        conv_backward(encoder_[lvl].conv2, cache.enc_a[lvl].data(), cache.enc_skip[lvl].data(), n, res, d_s, true,
                      grad_target(encoder_[lvl].conv2), d_a.data());
        const T* in = lvl == 0 ? cache.input.data() : cache.pooled[lvl - 1].data();
        if (lvl == 0) {
            conv_backward(encoder_[0].conv1, in, cache.enc_a[0].data(), n, res, d_a, true,
                          grad_target(encoder_[0].conv1), nullptr);
        } else {
            d_x.assign(cache.pooled[lvl - 1].size(), T(0));
            conv_backward(encoder_[lvl].conv1, in, cache.enc_a[lvl].data(), n, res, d_a, true,
                          grad_target(encoder_[lvl].conv1), d_x.data());
        }
    }
}

template <class T>
double UNet<T>::loss_and_grad(const Batch<T>& batch, ParamSet<T>& grads, std::span<const double> channel_weights,
                              const std::vector<bool>* trainable) const {
    if (batch.input_channels != spec_.input_channels || batch.size != spec_.tile_size ||
        batch.target_channels != spec_.output_channels()) {
        throw ShapeError("batch shape does not match the network spec");
    }
    // Heads whose channels all carry zero weight are skipped entirely.
    std::vector<bool> active(spec_.heads.size(), true);
    if (!channel_weights.empty()) {
        if (channel_weights.size() != spec_.output_channels()) throw ShapeError("channel weight count");
        for (std::size_t h = 0; h < spec_.heads.size(); ++h) {
            bool any = false;
            for (std::size_t c = 0; c < spec_.heads[h].output_channels; ++c) {
                any = any || channel_weights[head_offset(h) + c] != 0.0;
            }
            active[h] = any;
        }
    }
    if (grads.arrays.size() != params_.arrays.size()) grads = params_.zeros_like();
    grads.set_zero();
    if (batch.n == 0) return 0.0;
    // The loss is a mean over samples, so each sample is run forward and
    // backward on its own; activations then stay small enough for the cache.
    const std::size_t plane = batch.size * batch.size;
    const std::size_t in_len = batch.input_channels * plane;
    const std::size_t out_len = batch.target_channels * plane;
    const T scale = T(1) / static_cast<T>(batch.n);
    Cache cache;
    std::vector<T> d_pred(out_len);
    double loss = 0.0;
    for (std::size_t i = 0; i < batch.n; ++i) {
        const std::span<const T> in(batch.inputs.data() + i * in_len, in_len);
        const std::span<const T> target(batch.targets.data() + i * out_len, out_len);
        const std::span<const T> mask(batch.masks.data() + i * plane, plane);
        const auto pred = forward(in, 1, cache, &active);
        loss += masked_mse<T>(pred, target, mask, 1, batch.target_channels, batch.size, channel_weights);
        masked_mse_grad<T>(pred, target, mask, 1, batch.target_channels, batch.size, d_pred, channel_weights);
        for (auto& g : d_pred) g *= scale;
        backward(cache, d_pred, grads, trainable);
    }
    loss /= static_cast<double>(batch.n);
    if (!std::isfinite(loss)) throw NumericError("non-finite loss");
    return loss;
}

template <class T>
std::uint64_t UNet<T>::activation_signature(const Cache& cache) {
    std::uint64_t h = kFnvOffset;
    for (const auto& v : cache.enc_a) h = hash_positive(v, h);
    for (const auto& v : cache.enc_skip) h = hash_positive(v, h);
    for (const auto& a : cache.pool_arg) h = fnv1a(a.data(), a.size() * sizeof(std::uint32_t), h);
    h = hash_positive(cache.bott_a, h);
    h = hash_positive(cache.bott_b, h);
    for (const auto& hc : cache.heads) {
        for (const auto& v : hc.up_out) h = hash_positive(v, h);
        for (const auto& v : hc.conv_a) h = hash_positive(v, h);
        for (const auto& v : hc.conv_b) h = hash_positive(v, h);
    }
    return h;
}

template class UNet<float>;
template class UNet<double>;

// ---------------------------------------------------------------------------
// Gradient check

GradCheckReport grad_check(const UNetSpec& spec, std::uint64_t seed, const GradCheckOptions& options) {
    spec.validate();
    UNet<double> net(spec, init_params(spec, seed).cast<double>());
    // Perturb biases away from zero so every bias gradient path is exercised.
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (auto& a : net.params().arrays) {
        if (a.dims.size() == 1) {
            for (auto& v : a.values) v = 0.1 * normal(rng);
        }
    }

    Batch<double> batch;
    const std::size_t s = spec.tile_size;
    batch.resize(options.batch, spec.input_channels, spec.output_channels(), s);
    for (auto& v : batch.inputs) v = normal(rng);
    for (auto& v : batch.targets) v = normal(rng);
    for (std::size_t i = 0; i < batch.n; ++i) {
        for (std::size_t j = 0; j < s * s; ++j) batch.masks[i * s * s + j] = uniform(rng) < 0.8 ? 1.0 : 0.0;
        batch.masks[i * s * s + (s / 2) * s + s / 2] = 1.0;
    }
    for (std::size_t i = 0; i < batch.n; ++i) {
        for (std::size_t c = 0; c < batch.target_channels; ++c) {
            for (std::size_t j = 0; j < s * s; ++j) {
                batch.targets[(i * batch.target_channels + c) * s * s + j] *= batch.masks[i * s * s + j];
            }
        }
    }

    ParamSet<double> grads = net.params().zeros_like();
    net.loss_and_grad(batch, grads);
    if (options.corrupt) options.corrupt(grads);

    typename UNet<double>::Cache base_cache;
    net.forward(batch.inputs, batch.n, base_cache);
    const std::uint64_t base_sig = UNet<double>::activation_signature(base_cache);

    auto eval = [&](std::uint64_t& sig) {
        typename UNet<double>::Cache cache;
        const auto pred = net.forward(batch.inputs, batch.n, cache);
        sig = UNet<double>::activation_signature(cache);
        return masked_mse<double>(pred, batch.targets, batch.masks, batch.n, batch.target_channels, s);
    };

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t a = 0; a < net.params().arrays.size(); ++a) {
        for (std::size_t i = 0; i < net.params().arrays[a].values.size(); ++i) coords.emplace_back(a, i);
    }
    if (options.max_params != 0 && options.max_params < coords.size()) {
        const std::size_t keep = std::max<std::size_t>(options.max_params, 500);
        std::mt19937_64 pick(seed + 17);
        for (std::size_t i = 0; i < std::min(keep, coords.size()); ++i) {
            std::uniform_int_distribution<std::size_t> d(i, coords.size() - 1);
            std::swap(coords[i], coords[d(pick)]);
        }
        coords.resize(std::min(keep, coords.size()));
    }

    GradCheckReport report;
    for (const auto& [a, i] : coords) {
        auto& value = net.params().arrays[a].values[i];
        const double saved = value;
        std::uint64_t sig_plus = 0, sig_minus = 0;
        value = saved + options.epsilon;
        const double f_plus = eval(sig_plus);
        value = saved - options.epsilon;
        const double f_minus = eval(sig_minus);
        value = saved;
        if (sig_plus != base_sig || sig_minus != base_sig) {
            ++report.skipped_kinks;
            continue;
        }
        const double numeric = (f_plus - f_minus) / (2.0 * options.epsilon);
        const double analytic = grads.arrays[a].values[i];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), options.abs_floor});
        const double rel = std::abs(numeric - analytic) / denom;
        ++report.checked;
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_param = net.params().arrays[a].name + "[" + std::to_string(i) + "]";
        }
    }
    report.passed = report.checked > 0 && report.max_rel_error < options.tolerance;
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCheckpointMagic[4] = {'U', 'N', 'P', 'K'};
constexpr std::uint16_t kCheckpointVersion = 1;

template <class V>
void put(std::vector<std::uint8_t>& out, V v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(V));
}

void put_name(std::vector<std::uint8_t>& out, const std::string& s) {
    if (s.size() > 255) throw FormatError("name too long for checkpoint: " + s);
    put(out, static_cast<std::uint8_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

class ByteReader {
public:
    ByteReader(const std::vector<std::uint8_t>& b, std::string ctx) : b_(b), ctx_(std::move(ctx)) {}
    template <class V>
    V get() {
        if (b_.size() - pos_ < sizeof(V)) throw FormatError(ctx_ + ": truncated checkpoint");
        V v;
        std::memcpy(&v, b_.data() + pos_, sizeof(V));
        pos_ += sizeof(V);
        return v;
    }
    std::string name() {
        const auto len = get<std::uint8_t>();
        if (b_.size() - pos_ < len) throw FormatError(ctx_ + ": truncated checkpoint");
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), len);
        pos_ += len;
        return s;
    }
    void floats(std::vector<float>& out) {
        if ((b_.size() - pos_) / sizeof(float) < out.size()) throw FormatError(ctx_ + ": truncated checkpoint");
        std::memcpy(out.data(), b_.data() + pos_, out.size() * sizeof(float));
        pos_ += out.size() * sizeof(float);
    }
    bool done() const { return pos_ == b_.size(); }

private:
    const std::vector<std::uint8_t>& b_;
    std::string ctx_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const UNetSpec& spec, const UNetParams& params, const std::filesystem::path& path) {
    check_params(spec, params);
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    put(out, kCheckpointVersion);
    put(out, static_cast<std::uint16_t>(spec.input_channels));
    put(out, static_cast<std::uint16_t>(spec.base_features));
    put(out, static_cast<std::uint16_t>(spec.depth));
    put(out, static_cast<std::uint16_t>(spec.kernel_size));
    put(out, static_cast<std::uint16_t>(spec.tile_size));
    put(out, static_cast<std::uint8_t>(spec.auto_pad ? 1 : 0));
    put(out, static_cast<std::uint16_t>(spec.heads.size()));
    for (const auto& h : spec.heads) {
        put_name(out, h.name);
        put(out, static_cast<std::uint16_t>(h.output_channels));
    }
    put(out, static_cast<std::uint32_t>(params.arrays.size()));
    for (const auto& a : params.arrays) {
        put_name(out, a.name);
        put(out, static_cast<std::uint8_t>(a.dims.size()));
        for (auto d : a.dims) put(out, static_cast<std::uint32_t>(d));
        const auto* p = reinterpret_cast<const std::uint8_t*>(a.values.data());
        out.insert(out.end(), p, p + a.values.size() * sizeof(float));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    ByteReader r(bytes, path.string());
    for (char c : kCheckpointMagic) {
        if (r.get<char>() != c) throw FormatError(path.string() + ": not a UNPK checkpoint");
    }
    if (r.get<std::uint16_t>() != kCheckpointVersion) throw FormatError(path.string() + ": unsupported version");
    Checkpoint ck;
    ck.spec.input_channels = r.get<std::uint16_t>();
    ck.spec.base_features = r.get<std::uint16_t>();
    ck.spec.depth = r.get<std::uint16_t>();
    ck.spec.kernel_size = r.get<std::uint16_t>();
    ck.spec.tile_size = r.get<std::uint16_t>();
    ck.spec.auto_pad = r.get<std::uint8_t>() != 0;
    ck.spec.heads.clear();
    const auto n_heads = r.get<std::uint16_t>();
    for (std::size_t i = 0; i < n_heads; ++i) {
        HeadSpec h;
        h.name = r.name();
        h.output_channels = r.get<std::uint16_t>();
        ck.spec.heads.push_back(h);
    }
    ck.spec.validate();
    const auto n_arrays = r.get<std::uint32_t>();
    for (std::size_t i = 0; i < n_arrays; ++i) {
        ParamArray<float> a;
        a.name = r.name();
        const auto rank = r.get<std::uint8_t>();
        std::size_t count = 1;
        for (std::size_t d = 0; d < rank; ++d) {
            a.dims.push_back(r.get<std::uint32_t>());
            count *= a.dims.back();
        }
        a.values.resize(count);
        r.floats(a.values);
        ck.params.arrays.push_back(std::move(a));
    }
    if (!r.done()) throw FormatError(path.string() + ": trailing bytes after checkpoint data");
    check_params(ck.spec, ck.params);
    return ck;
}

}  // namespace urbanet
