#include "tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "parallel.hpp"

namespace fishseg {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstRowMap = Eigen::Map<const RowMat<S>>;

std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) raise(ErrorKind::Dimension, "non-positive extent in shape " + shape_to_string(shape));
        n *= d;
    }
    return n;
}

// activations are (C,H,W) or (N,C,H,W)
struct Dims4 {
    int n, c, h, w;
    bool batched;
    std::int64_t sample_size() const { return static_cast<std::int64_t>(c) * h * w; }
};

template <typename S>
Dims4 parse_nchw(const Tensor<S>& t, const char* op) {
    if (!t.defined()) raise(ErrorKind::InvalidArgument, std::string(op) + ": undefined tensor");
    if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
    if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
    raise(ErrorKind::Dimension, std::string(op) + ": expected rank 3 or 4, got shape " + shape_to_string(t.shape()));
}

template <typename S>
std::vector<int> with_chw(const Dims4& d, int c, int h, int w) {
    if (d.batched) return {d.n, c, h, w};
    return {c, h, w};
}

template <typename S>
bool track(const Tape<S>* tape, std::initializer_list<const Tensor<S>*> inputs) {
    if (!tape) return false;
    for (const Tensor<S>* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

// im2col for one sample: col has K*K*C rows laid out as (c, kh, kw) and
// Ho*Wo columns. Row-major storage so each (c,kh,kw) row is contiguous.
template <typename S>
void im2col(const S* x, int c, int h, int w, int k, int pad, int stride,
            int ho, int wo, S* col) {
    const std::int64_t ncols = static_cast<std::int64_t>(ho) * wo;
    for (int ic = 0; ic < c; ++ic) {
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                S* row = col + ((static_cast<std::int64_t>(ic) * k + kh) * k + kw) * ncols;
                for (int oh = 0; oh < ho; ++oh) {
                    const int ih = oh * stride + kh - pad;
                    S* dst = row + static_cast<std::int64_t>(oh) * wo;
                    if (ih < 0 || ih >= h) {
                        std::fill(dst, dst + wo, S(0));
                        continue;
                    }
                    const S* src = x + (static_cast<std::int64_t>(ic) * h + ih) * w;
                    if (stride == 1) {
                        const int lo = std::max(0, pad - kw);
                        const int hi = std::min(wo, w + pad - kw);
                        if (lo > 0) std::fill(dst, dst + lo, S(0));
                        if (hi > lo) std::memcpy(dst + lo, src + lo + kw - pad, sizeof(S) * static_cast<std::size_t>(hi - lo));
                        if (hi < wo) std::fill(dst + std::max(hi, lo), dst + wo, S(0));
                    } else {
                        for (int ow = 0; ow < wo; ++ow) {
                            const int iw = ow * stride + kw - pad;
                            dst[ow] = (iw >= 0 && iw < w) ? src[iw] : S(0);
                        }
                    }
                }
            }
        }
    }
}

// adjoint of im2col: scatter-add column gradients back onto the input
template <typename S>
void col2im_add(const S* col, int c, int h, int w, int k, int pad, int stride,
                int ho, int wo, S* gx) {
    const std::int64_t ncols = static_cast<std::int64_t>(ho) * wo;
    for (int ic = 0; ic < c; ++ic) {
        for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
                const S* row = col + ((static_cast<std::int64_t>(ic) * k + kh) * k + kw) * ncols;
                for (int oh = 0; oh < ho; ++oh) {
                    const int ih = oh * stride + kh - pad;
                    if (ih < 0 || ih >= h) continue;
                    S* dst = gx + (static_cast<std::int64_t>(ic) * h + ih) * w;
                    const S* src = row + static_cast<std::int64_t>(oh) * wo;
                    for (int ow = 0; ow < wo; ++ow) {
                        const int iw = ow * stride + kw - pad;
                        if (iw >= 0 && iw < w) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

}  // namespace

std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

// ---- Tensor --------------------------------------------------------------

template <typename S>
Tensor<S> Tensor<S>::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    const auto n = numel_of(shape);
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<std::size_t>(n), S(0));
    t.impl_->requires_grad = requires_grad;
    return t;
}

template <typename S>
Tensor<S> Tensor<S>::full(std::vector<int> shape, S value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

template <typename S>
Tensor<S> Tensor<S>::from_data(std::vector<int> shape, std::vector<S> data, bool requires_grad) {
    const auto n = numel_of(shape);
    if (n != static_cast<std::int64_t>(data.size()))
        raise(ErrorKind::Dimension, "data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_to_string(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

template <typename S>
Tensor<S> Tensor<S>::scalar(S value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

template <typename S>
std::vector<S>& Tensor<S>::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), S(0));
    return impl_->grad;
}

template <typename S>
const std::vector<S>& Tensor<S>::grad() const {
    return impl_->grad;
}

template <typename S>
void Tensor<S>::zero_grad() {
    if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), S(0));
}

// ---- Tape ----------------------------------------------------------------

template <typename S>
void Tape<S>::backward(Tensor<S>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        raise(ErrorKind::Dimension, "backward requires a scalar loss, got shape " +
                                        (loss.defined() ? shape_to_string(loss.shape()) : std::string("<undefined>")));
    loss.grad()[0] += S(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
}

// ---- conv2d ---------------------------------------------------------------

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 int padding, int stride, Tape<S>* tape) {
    const Dims4 d = parse_nchw(input, "conv2d");
    if (!weight.defined() || weight.rank() != 4)
        raise(ErrorKind::Dimension, "conv2d: weight must be rank 4 (C_out,C_in,K,K)");
    const int cout = weight.dim(0), cin = weight.dim(1), k = weight.dim(2);
    if (weight.dim(3) != k) raise(ErrorKind::Dimension, "conv2d: kernel must be square");
    if (cin != d.c)
        raise(ErrorKind::Dimension, "conv2d: input has " + std::to_string(d.c) +
                                        " channels but weight expects " + std::to_string(cin));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
        raise(ErrorKind::Dimension, "conv2d: bias must have shape (C_out)");
    if (padding < 0 || stride < 1) raise(ErrorKind::InvalidArgument, "conv2d: bad padding/stride");

    const int ho = (d.h + 2 * padding - k) / stride + 1;
    const int wo = (d.w + 2 * padding - k) / stride + 1;
    if (ho < 1 || wo < 1) raise(ErrorKind::Dimension, "conv2d: output would be empty");
    const std::int64_t ncols = static_cast<std::int64_t>(ho) * wo;
    const std::int64_t krows = static_cast<std::int64_t>(cin) * k * k;

    Tensor<S> out = Tensor<S>::zeros(with_chw<S>(d, cout, ho, wo));
    ConstRowMap<S> wm(weight.data().data(), cout, krows);

    const bool plain = (k == 1 && padding == 0 && stride == 1);
    const int row_workers = (d.n == 1) ? effective_workers(cout) : 1;

    parallel_for(d.n, [&](int n) {
        const S* xset = input.data().data() + n * d.sample_size();
        S* oset = out.data().data() + static_cast<std::int64_t>(n) * cout * ncols;
        RowMap<S> om(oset, cout, ncols);
        std::vector<S> colbuf;
        const S* colptr = xset;
        if (!plain) {
            colbuf.resize(static_cast<std::size_t>(krows * ncols));
            im2col(xset, d.c, d.h, d.w, k, padding, stride, ho, wo, colbuf.data());
            colptr = colbuf.data();
        }
        ConstRowMap<S> cm(colptr, krows, ncols);
        if (row_workers > 1) {
            const int block = (cout + row_workers - 1) / row_workers;
            parallel_for(row_workers, [&](int wk) {
                const int lo = wk * block;
                const int hi = std::min(cout, lo + block);
                if (lo < hi) om.middleRows(lo, hi - lo).noalias() = wm.middleRows(lo, hi - lo) * cm;
            });
        } else {
            om.noalias() = wm * cm;
        }
        if (bias.defined()) {
            for (int oc = 0; oc < cout; ++oc) om.row(oc).array() += bias.data()[static_cast<std::size_t>(oc)];
        }
    });

    if (track(tape, {&input, &weight, &bias})) {
        out.set_requires_grad(true);
        Tensor<S> x = input, w = weight, b = bias, o = out;
        const Dims4 dd = d;
        const int kk = k, pad = padding, str = stride;
        tape->record([x, w, b, o, dd, kk, pad, str, cout, ho, wo]() mutable {
            if (!o.has_grad()) return;
            const std::int64_t ncols = static_cast<std::int64_t>(ho) * wo;
            const std::int64_t krows = static_cast<std::int64_t>(dd.c) * kk * kk;
            const bool plain = (kk == 1 && pad == 0 && str == 1);
            const bool need_gx = x.requires_grad();
            const bool need_gw = w.requires_grad();
            const bool need_gb = b.defined() && b.requires_grad();
            ConstRowMap<S> wm(w.data().data(), cout, krows);
            RowMap<S> gwm(need_gw ? w.grad().data() : nullptr, need_gw ? cout : 0, need_gw ? krows : 0);
            std::vector<S> colbuf, cgbuf;
            for (int n = 0; n < dd.n; ++n) {
                ConstRowMap<S> gom(o.grad().data() + static_cast<std::int64_t>(n) * cout * ncols, cout, ncols);
                const S* xset = x.data().data() + n * dd.sample_size();
                if (need_gb) {
                    for (int oc = 0; oc < cout; ++oc) b.grad()[static_cast<std::size_t>(oc)] += gom.row(oc).sum();
                }
                if (need_gw) {
                    const S* colptr = xset;
                    if (!plain) {
                        colbuf.resize(static_cast<std::size_t>(krows * ncols));
                        im2col(xset, dd.c, dd.h, dd.w, kk, pad, str, ho, wo, colbuf.data());
                        colptr = colbuf.data();
                    }
                    ConstRowMap<S> cm(colptr, krows, ncols);
                    gwm.noalias() += gom * cm.transpose();
                }
                if (need_gx) {
                    S* gxset = x.grad().data() + n * dd.sample_size();
                    if (plain) {
                        RowMap<S> gxm(gxset, krows, ncols);
                        gxm.noalias() += wm.transpose() * gom;
                    } else {
                        cgbuf.resize(static_cast<std::size_t>(krows * ncols));
                        RowMap<S> cgm(cgbuf.data(), krows, ncols);
                        cgm.noalias() = wm.transpose() * gom;
                        col2im_add(cgbuf.data(), dd.c, dd.h, dd.w, kk, pad, str, ho, wo, gxset);
                    }
                }
            }
        });
    }
    return out;
}

// ---- max_pool2d ------------------------------------------------------------

template <typename S>
Tensor<S> max_pool2d(const Tensor<S>& input, Tape<S>* tape) {
    const Dims4 d = parse_nchw(input, "max_pool2d");
    if (d.h % 2 != 0 || d.w % 2 != 0)
        raise(ErrorKind::Dimension, "max_pool2d: spatial dims must be even, got " +
                                        std::to_string(d.h) + "x" + std::to_string(d.w));
    const int ho = d.h / 2, wo = d.w / 2;
    Tensor<S> out = Tensor<S>::zeros(with_chw<S>(d, d.c, ho, wo));
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));

    const S* xp = input.data().data();
    S* op = out.data().data();
    std::int64_t oi = 0;
    for (int n = 0; n < d.n; ++n) {
        for (int c = 0; c < d.c; ++c) {
            const std::int64_t plane = (static_cast<std::int64_t>(n) * d.c + c) * d.h * d.w;
            for (int oh = 0; oh < ho; ++oh) {
                for (int ow = 0; ow < wo; ++ow) {
                    std::int64_t best_idx = plane + static_cast<std::int64_t>(2 * oh) * d.w + 2 * ow;
                    S best = xp[best_idx];
                    for (int kh = 0; kh < 2; ++kh) {
                        for (int kw = 0; kw < 2; ++kw) {
                            const std::int64_t idx = plane + static_cast<std::int64_t>(2 * oh + kh) * d.w + (2 * ow + kw);
                            if (xp[idx] > best) {  // strict: first occurrence wins ties
                                best = xp[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    op[oi] = best;
                    (*argmax)[static_cast<std::size_t>(oi)] = best_idx;
                    ++oi;
                }
            }
        }
    }

    if (track(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor<S> x = input, o = out;
        tape->record([x, o, argmax]() mutable {
            if (!o.has_grad() || !x.requires_grad()) return;
            const auto& go = o.grad();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[static_cast<std::size_t>((*argmax)[i])] += go[i];
        });
    }
    return out;
}

// ---- transpose_conv2d -------------------------------------------------------
// 2x2 kernel / stride 2: exact spatial doubling, each output pixel written by
// exactly one (kh,kw) tap. Implemented as four 1x1 GEMMs plus a strided
// scatter.

template <typename S>
Tensor<S> transpose_conv2d(const Tensor<S>& input, const Tensor<S>& weight, Tape<S>* tape) {
    const Dims4 d = parse_nchw(input, "transpose_conv2d");
    if (!weight.defined() || weight.rank() != 4 || weight.dim(2) != 2 || weight.dim(3) != 2)
        raise(ErrorKind::Dimension, "transpose_conv2d: weight must be rank 4 (C_in,C_out,2,2)");
    if (weight.dim(0) != d.c)
        raise(ErrorKind::Dimension, "transpose_conv2d: input has " + std::to_string(d.c) +
                                        " channels but weight expects " + std::to_string(weight.dim(0)));
    const int cin = d.c, cout = weight.dim(1);
    const int ho = 2 * d.h, wo = 2 * d.w;
    const std::int64_t hw = static_cast<std::int64_t>(d.h) * d.w;
    Tensor<S> out = Tensor<S>::zeros(with_chw<S>(d, cout, ho, wo));

    // repack weight as four (C_out x C_in) tap matrices
    RowMat<S> taps[4];
    for (int t = 0; t < 4; ++t) taps[t].resize(cout, cin);
    for (int ic = 0; ic < cin; ++ic)
        for (int oc = 0; oc < cout; ++oc)
            for (int t = 0; t < 4; ++t)
                taps[t](oc, ic) = weight.data()[static_cast<std::size_t>(((ic * cout + oc) * 2 + t / 2) * 2 + t % 2)];

    parallel_for(d.n, [&](int n) {
        ConstRowMap<S> xm(input.data().data() + n * d.sample_size(), cin, hw);
        S* oset = out.data().data() + (static_cast<std::int64_t>(n) * cout) * ho * wo;
        RowMat<S> tmp(cout, hw);
        for (int t = 0; t < 4; ++t) {
            const int kh = t / 2, kw = t % 2;
            tmp.noalias() = taps[t] * xm;
            for (int oc = 0; oc < cout; ++oc) {
                const S* src = tmp.data() + static_cast<std::int64_t>(oc) * hw;
                S* plane = oset + static_cast<std::int64_t>(oc) * ho * wo;
                for (int ih = 0; ih < d.h; ++ih) {
                    S* dst = plane + static_cast<std::int64_t>(2 * ih + kh) * wo + kw;
                    const S* s = src + static_cast<std::int64_t>(ih) * d.w;
                    for (int iw = 0; iw < d.w; ++iw) dst[2 * iw] = s[iw];
                }
            }
        }
    });

    if (track(tape, {&input, &weight})) {
        out.set_requires_grad(true);
        Tensor<S> x = input, w = weight, o = out;
        const Dims4 dd = d;
        tape->record([x, w, o, dd, cout]() mutable {
            if (!o.has_grad()) return;
            const int cin = dd.c;
            const int ho = 2 * dd.h, wo = 2 * dd.w;
            const std::int64_t hw = static_cast<std::int64_t>(dd.h) * dd.w;
            RowMat<S> taps(4 * cout, cin);
            for (int ic = 0; ic < cin; ++ic)
                for (int oc = 0; oc < cout; ++oc)
                    for (int t = 0; t < 4; ++t)
                        taps(t * cout + oc, ic) = w.data()[static_cast<std::size_t>(((ic * cout + oc) * 2 + t / 2) * 2 + t % 2)];
            RowMat<S> gtaps = RowMat<S>::Zero(4 * cout, cin);
            RowMat<S> gotmp(cout, hw);
            const bool need_gx = x.requires_grad();
            const bool need_gw = w.requires_grad();
            for (int n = 0; n < dd.n; ++n) {
                const S* goset = o.grad().data() + (static_cast<std::int64_t>(n) * cout) * ho * wo;
                ConstRowMap<S> xm(x.data().data() + n * dd.sample_size(), cin, hw);
                for (int t = 0; t < 4; ++t) {
                    const int kh = t / 2, kw = t % 2;
                    for (int oc = 0; oc < cout; ++oc) {
                        const S* plane = goset + static_cast<std::int64_t>(oc) * ho * wo;
                        S* dst = gotmp.data() + static_cast<std::int64_t>(oc) * hw;
                        for (int ih = 0; ih < dd.h; ++ih) {
                            const S* s = plane + static_cast<std::int64_t>(2 * ih + kh) * wo + kw;
                            S* row = dst + static_cast<std::int64_t>(ih) * dd.w;
                            for (int iw = 0; iw < dd.w; ++iw) row[iw] = s[2 * iw];
                        }
                    }
                    if (need_gx) {
                        RowMap<S> gxm(x.grad().data() + n * dd.sample_size(), cin, hw);
                        gxm.noalias() += taps.middleRows(t * cout, cout).transpose() * gotmp;
                    }
                    if (need_gw) gtaps.middleRows(t * cout, cout).noalias() += gotmp * xm.transpose();
                }
            }
            if (need_gw) {
                auto& gw = w.grad();
                for (int ic = 0; ic < cin; ++ic)
                    for (int oc = 0; oc < cout; ++oc)
                        for (int t = 0; t < 4; ++t)
                            gw[static_cast<std::size_t>(((ic * cout + oc) * 2 + t / 2) * 2 + t % 2)] += gtaps(t * cout + oc, ic);
            }
        });
    }
    return out;
}

// ---- batch_norm2d -----------------------------------------------------------

template <typename S>
Tensor<S> batch_norm2d(const Tensor<S>& input, const Tensor<S>& gamma, const Tensor<S>& beta,
                       Tensor<S>& running_mean, Tensor<S>& running_var, Mode mode,
                       S momentum, S eps, Tape<S>* tape) {
    const Dims4 d = parse_nchw(input, "batch_norm2d");
    for (const Tensor<S>* t : {&gamma, &beta, &running_mean, &running_var}) {
        if (!t->defined() || t->rank() != 1 || t->dim(0) != d.c)
            raise(ErrorKind::Dimension, "batch_norm2d: parameter shape must be (C)");
    }
    const std::int64_t m = static_cast<std::int64_t>(d.n) * d.h * d.w;  // elements per channel
    if (m == 0) raise(ErrorKind::Dimension, "batch_norm2d: zero-size batch");

    Tensor<S> out = Tensor<S>::zeros(input.shape());
    const std::int64_t hw = static_cast<std::int64_t>(d.h) * d.w;
    const bool rec = track(tape, {&input, &gamma, &beta});

    std::shared_ptr<std::vector<S>> xhat;
    std::shared_ptr<std::vector<S>> inv_std = std::make_shared<std::vector<S>>(static_cast<std::size_t>(d.c));
    if (rec) xhat = std::make_shared<std::vector<S>>(input.data().size());

    const S* xp = input.data().data();
    S* op = out.data().data();

    for (int c = 0; c < d.c; ++c) {
        S mean, var;
        if (mode == Mode::Train) {
            double sum = 0.0, sq = 0.0;
            for (int n = 0; n < d.n; ++n) {
                const S* plane = xp + (static_cast<std::int64_t>(n) * d.c + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const double v = static_cast<double>(plane[i]);
                    sum += v;
                    sq += v * v;
                }
            }
            const double mu = sum / static_cast<double>(m);
            const double v2 = std::max(0.0, sq / static_cast<double>(m) - mu * mu);
            mean = static_cast<S>(mu);
            var = static_cast<S>(v2);
            running_mean.data()[static_cast<std::size_t>(c)] =
                (S(1) - momentum) * running_mean.data()[static_cast<std::size_t>(c)] + momentum * mean;
            running_var.data()[static_cast<std::size_t>(c)] =
                (S(1) - momentum) * running_var.data()[static_cast<std::size_t>(c)] + momentum * var;
        } else {
            mean = running_mean.data()[static_cast<std::size_t>(c)];
            var = running_var.data()[static_cast<std::size_t>(c)];
        }
        const S istd = S(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(c)] = istd;
        const S g = gamma.data()[static_cast<std::size_t>(c)];
        const S b = beta.data()[static_cast<std::size_t>(c)];
        for (int n = 0; n < d.n; ++n) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * d.c + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                const S xh = (xp[base + i] - mean) * istd;
                if (rec) (*xhat)[static_cast<std::size_t>(base + i)] = xh;
                op[base + i] = g * xh + b;
            }
        }
    }

    if (rec) {
        out.set_requires_grad(true);
        Tensor<S> x = input, g = gamma, bt = beta, o = out;
        const Dims4 dd = d;
        const bool train = (mode == Mode::Train);
        tape->record([x, g, bt, o, dd, xhat, inv_std, train]() mutable {
            if (!o.has_grad()) return;
            const std::int64_t hw = static_cast<std::int64_t>(dd.h) * dd.w;
            const std::int64_t m = static_cast<std::int64_t>(dd.n) * hw;
            const auto& go = o.grad();
            const bool need_gx = x.requires_grad();
            for (int c = 0; c < dd.c; ++c) {
                double sum_go = 0.0, sum_go_xhat = 0.0;
                for (int n = 0; n < dd.n; ++n) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * dd.c + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        const double gv = static_cast<double>(go[static_cast<std::size_t>(base + i)]);
                        sum_go += gv;
                        sum_go_xhat += gv * static_cast<double>((*xhat)[static_cast<std::size_t>(base + i)]);
                    }
                }
                if (g.requires_grad()) g.grad()[static_cast<std::size_t>(c)] += static_cast<S>(sum_go_xhat);
                if (bt.requires_grad()) bt.grad()[static_cast<std::size_t>(c)] += static_cast<S>(sum_go);
                if (!need_gx) continue;
                const S gc = g.data()[static_cast<std::size_t>(c)];
                const S istd = (*inv_std)[static_cast<std::size_t>(c)];
                if (train) {
                    const S mean_go = static_cast<S>(sum_go / static_cast<double>(m));
                    const S mean_go_xhat = static_cast<S>(sum_go_xhat / static_cast<double>(m));
                    for (int n = 0; n < dd.n; ++n) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * dd.c + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const std::size_t idx = static_cast<std::size_t>(base + i);
                            x.grad()[idx] += gc * istd * (go[idx] - mean_go - (*xhat)[idx] * mean_go_xhat);
                        }
                    }
                } else {  // running stats are constants in eval mode
                    for (int n = 0; n < dd.n; ++n) {
                        const std::int64_t base = (static_cast<std::int64_t>(n) * dd.c + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const std::size_t idx = static_cast<std::size_t>(base + i);
                            x.grad()[idx] += gc * istd * go[idx];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- elementwise ops --------------------------------------------------------

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& input, S slope, Tape<S>* tape) {
    if (!input.defined()) raise(ErrorKind::InvalidArgument, "leaky_relu: undefined tensor");
    Tensor<S> out = Tensor<S>::zeros(input.shape());
    const auto& xd = input.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] > S(0) ? xd[i] : slope * xd[i];

    if (track(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor<S> x = input, o = out;
        tape->record([x, o, slope]() mutable {
            if (!o.has_grad() || !x.requires_grad()) return;
            const auto& go = o.grad();
            const auto& xd = x.data();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < xd.size(); ++i)
                gx[i] += go[i] * (xd[i] > S(0) ? S(1) : slope);  // slope at exactly 0
        });
    }
    return out;
}

template <typename S>
Tensor<S> dropout(const Tensor<S>& input, double rate, Mode mode, Rng* rng, Tape<S>* tape) {
    if (!input.defined()) raise(ErrorKind::InvalidArgument, "dropout: undefined tensor");
    if (rate < 0.0 || rate >= 1.0)
        raise(ErrorKind::InvalidArgument, "dropout: rate must be in [0,1), got " + std::to_string(rate));
    if (mode == Mode::Eval || rate == 0.0) return input;
    if (!rng) raise(ErrorKind::State, "dropout: train mode needs an rng");

    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<std::uint8_t>>(input.data().size());
    Tensor<S> out = Tensor<S>::zeros(input.shape());
    const auto& xd = input.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const bool keep = rng->uniform() >= rate;
        (*mask)[i] = keep ? 1 : 0;
        od[i] = keep ? xd[i] * keep_scale : S(0);
    }

    if (track(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor<S> x = input, o = out;
        tape->record([x, o, mask, keep_scale]() mutable {
            if (!o.has_grad() || !x.requires_grad()) return;
            const auto& go = o.grad();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i)
                if ((*mask)[i]) gx[i] += go[i] * keep_scale;
        });
    }
    return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& input, Tape<S>* tape) {
    if (!input.defined()) raise(ErrorKind::InvalidArgument, "sigmoid: undefined tensor");
    Tensor<S> out = Tensor<S>::zeros(input.shape());
    const auto& xd = input.data();
    auto& od = out.data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const S v = xd[i];
        if (v >= S(0)) {
            od[i] = S(1) / (S(1) + std::exp(-v));
        } else {
            const S e = std::exp(v);
            od[i] = e / (S(1) + e);
        }
    }

    if (track(tape, {&input})) {
        out.set_requires_grad(true);
        Tensor<S> x = input, o = out;
        tape->record([x, o]() mutable {
            if (!o.has_grad() || !x.requires_grad()) return;
            const auto& go = o.grad();
            const auto& y = o.data();
            auto& gx = x.grad();
            for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * y[i] * (S(1) - y[i]);
        });
    }
    return out;
}

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
    const Dims4 da = parse_nchw(a, "concat_channels");
    const Dims4 db = parse_nchw(b, "concat_channels");
    if (da.n != db.n || da.h != db.h || da.w != db.w || da.batched != db.batched)
        raise(ErrorKind::Dimension, "concat_channels: spatial/batch mismatch " +
                                        shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
    const int co = da.c + db.c;
    Tensor<S> out = Tensor<S>::zeros(with_chw<S>(da, co, da.h, da.w));
    const std::int64_t hw = static_cast<std::int64_t>(da.h) * da.w;
    for (int n = 0; n < da.n; ++n) {
        S* dst = out.data().data() + static_cast<std::int64_t>(n) * co * hw;
        std::memcpy(dst, a.data().data() + n * da.sample_size(), sizeof(S) * static_cast<std::size_t>(da.sample_size()));
        std::memcpy(dst + da.sample_size(), b.data().data() + n * db.sample_size(),
                    sizeof(S) * static_cast<std::size_t>(db.sample_size()));
    }

    if (track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor<S> ta = a, tb = b, o = out;
        const Dims4 dda = da, ddb = db;
        tape->record([ta, tb, o, dda, ddb, co, hw]() mutable {
            if (!o.has_grad()) return;
            const auto& go = o.grad();
            for (int n = 0; n < dda.n; ++n) {
                const S* src = go.data() + static_cast<std::int64_t>(n) * co * hw;
                if (ta.requires_grad()) {
                    auto& ga = ta.grad();
                    S* dst = ga.data() + n * dda.sample_size();
                    for (std::int64_t i = 0; i < dda.sample_size(); ++i) dst[i] += src[i];
                }
                if (tb.requires_grad()) {
                    auto& gb = tb.grad();
                    S* dst = gb.data() + n * ddb.sample_size();
                    const S* s2 = src + dda.sample_size();
                    for (std::int64_t i = 0; i < ddb.sample_size(); ++i) dst[i] += s2[i];
                }
            }
        });
    }
    return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
    if (a.shape() != b.shape()) raise(ErrorKind::Dimension, "add: shape mismatch");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor<S> ta = a, tb = b, o = out;
        tape->record([ta, tb, o]() mutable {
            if (!o.has_grad()) return;
            const auto& go = o.grad();
            if (ta.requires_grad())
                for (std::size_t i = 0; i < go.size(); ++i) ta.grad()[i] += go[i];
            if (tb.requires_grad())
                for (std::size_t i = 0; i < go.size(); ++i) tb.grad()[i] += go[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape) {
    if (a.shape() != b.shape()) raise(ErrorKind::Dimension, "mul: shape mismatch");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (track(tape, {&a, &b})) {
        out.set_requires_grad(true);
        Tensor<S> ta = a, tb = b, o = out;
        tape->record([ta, tb, o]() mutable {
            if (!o.has_grad()) return;
            const auto& go = o.grad();
            if (ta.requires_grad())
                for (std::size_t i = 0; i < go.size(); ++i) ta.grad()[i] += go[i] * tb.data()[i];
            if (tb.requires_grad())
                for (std::size_t i = 0; i < go.size(); ++i) tb.grad()[i] += go[i] * ta.data()[i];
        });
    }
    return out;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c, Tape<S>* tape) {
    if (!a.defined()) raise(ErrorKind::InvalidArgument, "scale: undefined tensor");
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] * c;
    if (track(tape, {&a})) {
        out.set_requires_grad(true);
        Tensor<S> ta = a, o = out;
        tape->record([ta, o, c]() mutable {
            if (!o.has_grad() || !ta.requires_grad()) return;
            const auto& go = o.grad();
            for (std::size_t i = 0; i < go.size(); ++i) ta.grad()[i] += go[i] * c;
        });
    }
    return out;
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a, Tape<S>* tape) {
    if (!a.defined()) raise(ErrorKind::InvalidArgument, "sum_all: undefined tensor");
    double acc = 0.0;
    for (const S v : a.data()) acc += static_cast<double>(v);
    Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc));
    if (track(tape, {&a})) {
        out.set_requires_grad(true);
        Tensor<S> ta = a, o = out;
        tape->record([ta, o]() mutable {
            if (!o.has_grad() || !ta.requires_grad()) return;
            const S g = o.grad()[0];
            for (std::size_t i = 0; i < ta.data().size(); ++i) ta.grad()[i] += g;
        });
    }
    return out;
}

// ---- explicit instantiations -------------------------------------------------

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

#define FISHSEG_INSTANTIATE_OPS(S)                                                                        \
    template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int, Tape<S>*); \
    template Tensor<S> max_pool2d<S>(const Tensor<S>&, Tape<S>*);                                        \
    template Tensor<S> transpose_conv2d<S>(const Tensor<S>&, const Tensor<S>&, Tape<S>*);                \
    template Tensor<S> batch_norm2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Tensor<S>&, \
                                       Tensor<S>&, Mode, S, S, Tape<S>*);                                \
    template Tensor<S> leaky_relu<S>(const Tensor<S>&, S, Tape<S>*);                                     \
    template Tensor<S> dropout<S>(const Tensor<S>&, double, Mode, Rng*, Tape<S>*);                       \
    template Tensor<S> sigmoid<S>(const Tensor<S>&, Tape<S>*);                                           \
    template Tensor<S> concat_channels<S>(const Tensor<S>&, const Tensor<S>&, Tape<S>*);                 \
    template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&, Tape<S>*);                             \
    template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&, Tape<S>*);                             \
    template Tensor<S> scale<S>(const Tensor<S>&, S, Tape<S>*);                                          \
    template Tensor<S> sum_all<S>(const Tensor<S>&, Tape<S>*);

FISHSEG_INSTANTIATE_OPS(float)
FISHSEG_INSTANTIATE_OPS(double)

#undef FISHSEG_INSTANTIATE_OPS

}  // namespace fishseg
