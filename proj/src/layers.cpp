#include "layers.hpp"

#include <cmath>

namespace fishseg {

template <typename S>
void he_normal_init(Tensor<S>& weight, int fan_in, Rng& rng) {
    if (fan_in <= 0) raise(ErrorKind::InvalidArgument, "he_normal_init: fan_in must be positive");
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : weight.data()) v = static_cast<S>(rng.normal(0.0, stddev));
}

// ---- Conv2dLayer -----------------------------------------------------------

template <typename S>
Conv2dLayer<S> Conv2dLayer<S>::make(int in_ch, int out_ch, int kernel, Rng& rng) {
    Conv2dLayer l;
    l.weight = Tensor<S>::zeros({out_ch, in_ch, kernel, kernel}, true);
    l.bias = Tensor<S>::zeros({out_ch}, true);
    l.padding = (kernel - 1) / 2;
    l.stride = 1;
    he_normal_init(l.weight, in_ch * kernel * kernel, rng);
    return l;
}

template <typename S>
Tensor<S> Conv2dLayer<S>::forward(const Tensor<S>& x, Tape<S>* tape) const {
    return conv2d(x, weight, bias, padding, stride, tape);
}

// ---- BatchNorm2dLayer --------------------------------------------------------

template <typename S>
BatchNorm2dLayer<S> BatchNorm2dLayer<S>::make(int channels) {
    BatchNorm2dLayer l;
    l.gamma = Tensor<S>::full({channels}, S(1), true);
    l.beta = Tensor<S>::zeros({channels}, true);
    l.running_mean = Tensor<S>::zeros({channels});
    l.running_var = Tensor<S>::full({channels}, S(1));
    return l;
}

template <typename S>
Tensor<S> BatchNorm2dLayer<S>::forward(const Tensor<S>& x, Mode mode, Tape<S>* tape) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, mode, momentum, eps, tape);
}

// ---- ConvLayerBlock ----------------------------------------------------------

template <typename S>
ConvLayerBlock<S> ConvLayerBlock<S>::make(int in_ch, int out_ch, Rng& rng) {
    ConvLayerBlock b;
    b.in_channels = in_ch;
    b.out_channels = out_ch;
    b.conv1 = Conv2dLayer<S>::make(in_ch, out_ch, 3, rng);
    b.bn1 = BatchNorm2dLayer<S>::make(out_ch);
    b.conv2 = Conv2dLayer<S>::make(out_ch, out_ch, 3, rng);
    b.bn2 = BatchNorm2dLayer<S>::make(out_ch);
    return b;
}

template <typename S>
Tensor<S> ConvLayerBlock<S>::forward(const Tensor<S>& x, Mode mode, Rng* rng, Tape<S>* tape, bool fold_bn) {
    Tensor<S> h = conv1.forward(x, tape);
    if (!fold_bn) h = bn1.forward(h, mode, tape);
    h = dropout(h, dropout_rate, mode, rng, tape);
    h = conv2.forward(h, tape);
    if (!fold_bn) h = bn2.forward(h, mode, tape);
    return leaky_relu(h, S(0.2), tape);
}

// ---- UpSampleBlock -------------------------------------------------------------

template <typename S>
UpSampleBlock<S> UpSampleBlock<S>::make(int in_ch, Rng& rng) {
    if (in_ch % 2 != 0) raise(ErrorKind::InvalidArgument, "UpSampleBlock: in_channels must be even");
    UpSampleBlock b;
    b.in_channels = in_ch;
    b.tconv_weight = Tensor<S>::zeros({in_ch, in_ch / 2, 2, 2}, true);
    he_normal_init(b.tconv_weight, in_ch * 2 * 2, rng);
    return b;
}

template <typename S>
Tensor<S> UpSampleBlock<S>::forward(const Tensor<S>& x, const Tensor<S>& skip, Tape<S>* tape) const {
    Tensor<S> up = transpose_conv2d(x, tconv_weight, tape);
    const int sr = skip.rank();
    const int uh = up.dim(up.rank() - 2), uw = up.dim(up.rank() - 1);
    const int sh = skip.dim(sr - 2), sw = skip.dim(sr - 1);
    if (uh != sh || uw != sw)
        raise(ErrorKind::Dimension, "UpSampleBlock: skip spatial dims " + shape_to_string(skip.shape()) +
                                        " do not match upsampled " + shape_to_string(up.shape()));
    return concat_channels(up, skip, tape);
}

// ---- SigmoidHead ---------------------------------------------------------------

template <typename S>
SigmoidHead<S> SigmoidHead<S>::make(int in_ch, Rng& rng) {
    SigmoidHead h;
    h.conv = Conv2dLayer<S>::make(in_ch, 1, 1, rng);
    return h;
}

template <typename S>
Tensor<S> SigmoidHead<S>::forward(const Tensor<S>& x, Tape<S>* tape) const {
    return sigmoid(conv.forward(x, tape), tape);
}

template struct Conv2dLayer<float>;
template struct Conv2dLayer<double>;
template struct BatchNorm2dLayer<float>;
template struct BatchNorm2dLayer<double>;
template struct ConvLayerBlock<float>;
template struct ConvLayerBlock<double>;
template struct UpSampleBlock<float>;
template struct UpSampleBlock<double>;
template struct SigmoidHead<float>;
template struct SigmoidHead<double>;

template void he_normal_init<float>(Tensor<float>&, int, Rng&);
template void he_normal_init<double>(Tensor<double>&, int, Rng&);

}  // namespace fishseg
