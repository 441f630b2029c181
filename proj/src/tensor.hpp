#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "error.hpp"
#include "rng.hpp"

namespace fishseg {

enum class Mode { Train, Eval };

// Dense tensor with optional gradient buffer. Cheap shared handle: copies
// alias the same storage. Layout is contiguous row-major over `shape`
// (channels-first for feature maps: C x H x W, optionally N x C x H x W).
template <typename S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, S value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<S> data, bool requires_grad = false);
    static Tensor scalar(S value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::vector<S>& data() { return impl_->data; }
    const std::vector<S>& data() const { return impl_->data; }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    // Gradient buffer, allocated to zeros on first access.
    std::vector<S>& grad();
    const std::vector<S>& grad() const;
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    void zero_grad();

    // identity of the underlying storage (graph node identity)
    const void* node_id() const { return impl_.get(); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    struct Impl {
        std::vector<int> shape;
        std::vector<S> data;
        std::vector<S> grad;
        bool requires_grad = false;
    };

    std::shared_ptr<Impl> impl_;
};

// Ordered record of differentiable operations. backward() replays the
// records in reverse, visiting each exactly once; gradients accumulate
// additively into every input's grad buffer.
template <typename S>
class Tape {
public:
    void record(std::function<void()> backward_fn) {
        records_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and replays the tape. `loss` must be scalar.
    void backward(Tensor<S>& loss);

private:
    std::vector<std::function<void()>> records_;
};

std::string shape_to_string(const std::vector<int>& shape);

// ---- differentiable ops -------------------------------------------------
// Each op accepts rank-3 (C,H,W) or rank-4 (N,C,H,W) activations and returns
// the same rank. `tape` may be null for pure inference.

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 int padding, int stride, Tape<S>* tape);

template <typename S>
Tensor<S> max_pool2d(const Tensor<S>& input, Tape<S>* tape);  // 2x2 window, stride 2

// 2x2 kernel, stride 2, no bias; weight shape (C_in, C_out, 2, 2)
template <typename S>
Tensor<S> transpose_conv2d(const Tensor<S>& input, const Tensor<S>& weight, Tape<S>* tape);

template <typename S>
Tensor<S> batch_norm2d(const Tensor<S>& input, const Tensor<S>& gamma, const Tensor<S>& beta,
                       Tensor<S>& running_mean, Tensor<S>& running_var, Mode mode,
                       S momentum, S eps, Tape<S>* tape);

template <typename S>
Tensor<S> leaky_relu(const Tensor<S>& input, S slope, Tape<S>* tape);

template <typename S>
Tensor<S> dropout(const Tensor<S>& input, double rate, Mode mode, Rng* rng, Tape<S>* tape);

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& input, Tape<S>* tape);

// concat along the channel dimension; spatial dims must match
template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape);

// elementwise / reduction helpers
template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape);

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape);

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S c, Tape<S>* tape);

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a, Tape<S>* tape);  // scalar result

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace fishseg
