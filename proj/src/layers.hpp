#pragma once

#include <string>
#include <vector>

#include "tensor.hpp"

namespace fishseg {

// He normal: zero-mean Gaussian with stddev sqrt(2 / fan_in).
template <typename S>
void he_normal_init(Tensor<S>& weight, int fan_in, Rng& rng);

template <typename S>
struct NamedTensor {
    std::string name;
    Tensor<S> tensor;
};

template <typename S>
struct Conv2dLayer {
    Tensor<S> weight;  // (C_out, C_in, K, K)
    Tensor<S> bias;    // (C_out)
    int padding = 1;
    int stride = 1;

    static Conv2dLayer make(int in_ch, int out_ch, int kernel, Rng& rng);
    Tensor<S> forward(const Tensor<S>& x, Tape<S>* tape) const;
};

template <typename S>
struct BatchNorm2dLayer {
    Tensor<S> gamma, beta;
    Tensor<S> running_mean, running_var;
    S momentum = S(0.1);
    S eps = S(1e-5);

    static BatchNorm2dLayer make(int channels);
    Tensor<S> forward(const Tensor<S>& x, Mode mode, Tape<S>* tape);
};

// conv -> BN -> dropout -> conv -> BN, then leaky ReLU(0.2). 3x3 kernels,
// pad 1, so spatial dims are preserved.
template <typename S>
struct ConvLayerBlock {
    int in_channels = 0, out_channels = 0;
    Conv2dLayer<S> conv1, conv2;
    BatchNorm2dLayer<S> bn1, bn2;
    double dropout_rate = 0.1;

    static ConvLayerBlock make(int in_ch, int out_ch, Rng& rng);
    Tensor<S> forward(const Tensor<S>& x, Mode mode, Rng* rng, Tape<S>* tape, bool fold_bn = false);
};

// transpose conv (halves channels, doubles H and W) followed by channel
// concatenation with the encoder skip tensor: out channels = C/2 + C_skip.
template <typename S>
struct UpSampleBlock {
    int in_channels = 0;
    Tensor<S> tconv_weight;  // (C_in, C_in/2, 2, 2)

    static UpSampleBlock make(int in_ch, Rng& rng);
    Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& skip, Tape<S>* tape) const;
};

// 1x1 conv down to one channel plus sigmoid
template <typename S>
struct SigmoidHead {
    Conv2dLayer<S> conv;

    static SigmoidHead make(int in_ch, Rng& rng);
    Tensor<S> forward(const Tensor<S>& x, Tape<S>* tape) const;
};

extern template struct Conv2dLayer<float>;
extern template struct Conv2dLayer<double>;
extern template struct BatchNorm2dLayer<float>;
extern template struct BatchNorm2dLayer<double>;
extern template struct ConvLayerBlock<float>;
extern template struct ConvLayerBlock<double>;
extern template struct UpSampleBlock<float>;
extern template struct UpSampleBlock<double>;
extern template struct SigmoidHead<float>;
extern template struct SigmoidHead<double>;

}  // namespace fishseg
