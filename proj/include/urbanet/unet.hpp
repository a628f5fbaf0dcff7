#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace urbanet {

struct HeadSpec {
    std::string name;
    std::size_t output_channels = 1;

    friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

// Encoder/decoder shape. Each level is two same-padded convolutions with
// max(0, x); 2x2 max pooling between encoder levels; the decoder upsamples
// (nearest neighbour) then convolves, concatenates the skip connection and
// applies two more convolutions. One decoder per head, each ending in a
// linear 1x1 convolution.
struct UNetSpec {
    std::size_t input_channels = 9;
    std::size_t base_features = 8;
    std::size_t depth = 2;
    std::size_t kernel_size = 3;
    std::size_t tile_size = 28;
    // Zero-pad tiles to a multiple of 2^depth internally and crop the output back.
    bool auto_pad = true;
    std::vector<HeadSpec> heads = {{"d_urban", 1}};

    void validate() const;
    std::size_t padded_size() const;
    std::size_t output_channels() const;
    std::size_t features(std::size_t level) const { return base_features << level; }

    static UNetSpec desk_scale(std::size_t tile_size = 28);
    static UNetSpec full_scale(std::size_t tile_size = 28);

    friend bool operator==(const UNetSpec&, const UNetSpec&) = default;
};

template <class T>
struct ParamArray {
    std::string name;
    std::vector<std::size_t> dims;
    std::vector<T> values;
};

// Named weight arrays in a fixed order.
template <class T>
class ParamSet {
public:
    std::vector<ParamArray<T>> arrays;

    std::size_t index_of(std::string_view name) const;
    const ParamArray<T>& at(std::string_view name) const { return arrays[index_of(name)]; }
    ParamArray<T>& at(std::string_view name) { return arrays[index_of(name)]; }
    std::size_t count() const;  // total scalar parameters
    void set_zero();
    ParamSet zeros_like() const;

    template <class U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& a : arrays) {
            out.arrays.push_back({a.name, a.dims, std::vector<U>(a.values.begin(), a.values.end())});
        }
        return out;
    }
};

using UNetParams = ParamSet<float>;

// "encoder" or "decoder.<head>".
std::string param_group(std::string_view param_name);

// Expected (name, dims) of every array for `spec`, in storage order.
std::vector<std::pair<std::string, std::vector<std::size_t>>> param_layout(const UNetSpec& spec);

// Fan-in scaled normal weights (variance 2/fan_in), zero biases. Each array is
// seeded from (seed, array name).
UNetParams init_params(const UNetSpec& spec, std::uint64_t seed);

template <class T>
void check_params(const UNetSpec& spec, const ParamSet<T>& params);

// FNV-1a over the raw bytes of the selected arrays (all when `group` is empty).
std::uint64_t params_hash(const UNetParams& params, std::string_view group = {});

// inputs/targets: n x C x S x S, masks: n x S x S, all row-major.
template <class T>
struct Batch {
    std::size_t n = 0;
    std::size_t input_channels = 0;
    std::size_t target_channels = 0;
    std::size_t size = 0;
    std::vector<T> inputs;
    std::vector<T> targets;
    std::vector<T> masks;

    void resize(std::size_t n_, std::size_t cin, std::size_t ct, std::size_t s);
};

// Masked MSE: mean over samples of (sum of masked squared residuals
// / count of valid pixels). Channels are combined as a weighted mean of the
// per-channel values (equal weights when `channel_weights` is empty).
template <class T>
double masked_mse(std::span<const T> pred, std::span<const T> target, std::span<const T> mask, std::size_t n,
                  std::size_t channels, std::size_t size, std::span<const double> channel_weights = {});

// Gradient of masked_mse with respect to `pred`.
template <class T>
void masked_mse_grad(std::span<const T> pred, std::span<const T> target, std::span<const T> mask, std::size_t n,
                     std::size_t channels, std::size_t size, std::span<T> grad,
                     std::span<const double> channel_weights = {});

template <class T>
class UNet {
public:
    struct HeadCache {
        std::vector<std::vector<T>> up_in, up_out, cat, conv_a, conv_b;  // per level
        std::vector<T> out;                                              // n x oc x P x P
    };
    struct Cache {
        std::size_t n = 0;
        std::vector<T> input;  // padded, n x Cin x P x P
        std::vector<std::vector<T>> enc_a, enc_skip, pooled;
        std::vector<std::vector<std::uint32_t>> pool_arg;
        std::vector<T> bott_a, bott_b;
        std::vector<HeadCache> heads;
        std::vector<bool> active;
    };

    UNet(UNetSpec spec, ParamSet<T> params);

    const UNetSpec& spec() const { return spec_; }
    const ParamSet<T>& params() const { return params_; }
    ParamSet<T>& params() { return params_; }

    // inputs: n x Cin x S x S; returns n x Ct x S x S. Inactive heads output 0.
    std::vector<T> forward(std::span<const T> inputs, std::size_t n) const;
    std::vector<T> forward(std::span<const T> inputs, std::size_t n, Cache& cache,
                           const std::vector<bool>* active_heads = nullptr) const;

    // d_outputs: n x Ct x S x S. Adds parameter gradients into `grads`; arrays
    // whose entry in `trainable` is false are skipped, and the encoder is not
    // back-propagated at all when none of its arrays is trainable.
    void backward(const Cache& cache, std::span<const T> d_outputs, ParamSet<T>& grads,
                  const std::vector<bool>* trainable = nullptr) const;

    // Loss (masked_mse) of a batch and its parameter gradients (grads is overwritten).
    double loss_and_grad(const Batch<T>& batch, ParamSet<T>& grads, std::span<const double> channel_weights = {},
                         const std::vector<bool>* trainable = nullptr) const;

    // Hash of every activation pattern (max(0,x) signs, pooling choices).
    static std::uint64_t activation_signature(const Cache& cache);

    std::size_t head_offset(std::size_t head) const;  // first output channel of `head`

private:
    struct Conv {
        std::string name;
        std::size_t weight = 0, bias = 0, cin = 0, cout = 0, k = 0;
    };
    struct Level {
        Conv conv1, conv2;
    };
    struct DecoderLevel {
        Conv up, conv1, conv2;
    };
    struct Decoder {
        std::vector<DecoderLevel> levels;
        Conv out;
    };

    Conv conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k) const;
    void conv_forward(const Conv& c, const T* in, std::size_t n, std::size_t res, T* out, bool relu) const;
    void conv_backward(const Conv& c, const T* in, const T* out, std::size_t n, std::size_t res, std::vector<T>& d_out,
                       bool relu, ParamSet<T>* grads, T* d_in) const;

    UNetSpec spec_;
    ParamSet<T> params_;
    std::vector<Level> encoder_;
    Level bottleneck_;
    std::vector<Decoder> decoders_;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;  // FD step crossed a max(0,x)/pooling switch
    bool passed = false;
};

struct GradCheckOptions {
    std::size_t batch = 2;
    double epsilon = 1e-5;
    double tolerance = 1e-4;
    // Denominator floor for relative error.
    double abs_floor = 1e-6;
    // 0 = every parameter; otherwise a seeded sample of at least 500.
    std::size_t max_params = 0;
    // Test hook: mutate the analytic gradients before comparison.
    std::function<void(ParamSet<double>&)> corrupt;
};

// Compares backward() against central differences, fully in 64-bit.
GradCheckReport grad_check(const UNetSpec& spec, std::uint64_t seed, const GradCheckOptions& options = {});

void save_checkpoint(const UNetSpec& spec, const UNetParams& params, const std::filesystem::path& path);

struct Checkpoint {
    UNetSpec spec;
    UNetParams params;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace urbanet
