#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/kernels.hpp"

namespace moelab::num {

class Tensor;

namespace detail {

struct TensorData {
    std::vector<int64_t> shape;
    std::vector<Scalar> values;
    std::unique_ptr<std::vector<Scalar>> grad;  // lazily allocated, zeroed
    bool requires_grad = false;                 // user-set leaf flag
    bool tracked = false;                       // on the active tape's path

    std::vector<Scalar>& ensure_grad();
    void add_grad(const Scalar* g, int64_t n);
};

}  // namespace detail

// Dense n-dimensional tensor of Scalar (64-bit by default) with value
// semantics on the handle and shared storage underneath. Participates in
// reverse-mode differentiation when a Tape is active.
class Tensor {
  public:
    Tensor();
    explicit Tensor(std::vector<int64_t> shape);  // zero-filled
    Tensor(std::vector<int64_t> shape, std::vector<Scalar> values);

    static Tensor scalar(Scalar v);
    static Tensor zeros(std::vector<int64_t> shape);
    static Tensor full(std::vector<int64_t> shape, Scalar v);

    const std::vector<int64_t>& shape() const { return d_->shape; }
    int64_t rank() const { return static_cast<int64_t>(d_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }
    int64_t extent(int64_t axis) const;
    int64_t rows() const;  // rank-2 helpers
    int64_t cols() const;
    std::string shape_str() const;

    Scalar* data() { return d_->values.data(); }
    const Scalar* data() const { return d_->values.data(); }
    std::span<const Scalar> values() const { return d_->values; }
    Scalar value() const;           // scalar tensors only
    Scalar at(int64_t i) const;
    Scalar at(int64_t i, int64_t j) const;
    Scalar& at(int64_t i);
    Scalar& at(int64_t i, int64_t j);

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    bool tracked() const { return d_->tracked || d_->requires_grad; }

    bool has_grad() const { return d_->grad != nullptr; }
    const std::vector<Scalar>& grad() const;
    void zero_grad() { d_->grad.reset(); }

    bool defined() const { return !d_->shape.empty() || !d_->values.empty(); }
    void check_finite(const std::string& where) const;

    detail::TensorData* impl() const { return d_.get(); }
    std::shared_ptr<detail::TensorData> share() const { return d_; }

  private:
    std::shared_ptr<detail::TensorData> d_;
};

// Records the operations of a forward computation in execution order, which
// is already a topological order. backward() replays the records once, in
// reverse. One tape belongs to one thread.
class Tape {
  public:
    explicit Tape(uint64_t seed = 0);

    std::mt19937_64& rng() { return rng_; }
    void reseed(uint64_t seed) { rng_.seed(seed); }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void record(std::vector<std::shared_ptr<detail::TensorData>> inputs,
                std::shared_ptr<detail::TensorData> output,
                std::function<void()> backward);

    // Populates grad on every requires_grad leaf reachable from loss.
    // Repeated calls without zero_grad accumulate on leaves. A loss with no
    // tracked ancestry is a no-op.
    void backward(const Tensor& loss);

    static Tape* active();

    class Scope {
      public:
        explicit Scope(Tape& tape);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

      private:
        Tape* prev_;
    };

  private:
    struct Node {
        std::vector<std::shared_ptr<detail::TensorData>> inputs;
        std::shared_ptr<detail::TensorData> output;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
    std::mt19937_64 rng_;
};

// When enabled, every op verifies its output is finite and raises
// NumericError otherwise. Off by default (verification mode for debugging).
void set_debug_checks(bool on);
bool debug_checks();

// ---- ops ----------------------------------------------------------------
// All ops work with or without an active tape; they record a backward node
// only when a tape is active and some input is tracked.

// Standard matrix product with optional transposes. Increments the global
// MAC counter by m*k*n (effective product dims) in counting mode.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);

Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor sub(const Tensor& a, const Tensor& b);        // same shape
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise
Tensor scale(const Tensor& a, Scalar c);
Tensor add_row_bias(const Tensor& x, const Tensor& bias);  // trailing axis
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x, int64_t axis);
Tensor sum(const Tensor& x);    // -> scalar
Tensor mean(const Tensor& x);   // -> scalar
Tensor reshape(const Tensor& x, std::vector<int64_t> shape);

// Row gathering/scattering over rank-2 tensors.
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx);
Tensor scatter_rows(const Tensor& x, const std::vector<int64_t>& idx,
                    int64_t out_rows);  // duplicate rows accumulate
Tensor slice_rows(const Tensor& x, int64_t start, int64_t len);
Tensor concat_rows(const std::vector<Tensor>& parts);

// Column-wise concat of two rank-2 tensors with equal row counts.
Tensor concat_cols(const Tensor& a, const Tensor& b);
// Column-wise concat of x [n x p] with a single row [1 x q] broadcast to all
// rows (domain embedding concatenation).
Tensor concat_cols_broadcast(const Tensor& x, const Tensor& row);

Tensor row_sum(const Tensor& x);                      // [n x c] -> [n x 1]
Tensor mul_rowwise(const Tensor& x, const Tensor& s); // s [n x 1]
Tensor div_rowwise(const Tensor& x, const Tensor& s); // s [n x 1]

// Picks x[rows[i], cols[i]] into a [m x 1] tensor.
Tensor gather_cells(const Tensor& x, const std::vector<int64_t>& row_idx,
                    const std::vector<int64_t>& col_idx);

// Inverted dropout driven by the active tape's RNG; identity when rate == 0
// or no tape is active.
Tensor dropout(const Tensor& x, double rate);

// Fused layer normalization over the last axis of a rank-2 input, with
// affine rescale. Normalized rows have mean 0 and unit variance (1/c).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  Scalar eps = 1e-12);

// Fused token-sum cross entropy with label smoothing over logits [n x V].
// Masked rows contribute nothing. Returns a scalar tensor (sum, not mean).
Tensor cross_entropy_sum(const Tensor& logits,
                         const std::vector<int32_t>& targets,
                         const std::vector<uint8_t>& mask, double smoothing);

int64_t argmax_row(const Tensor& x, int64_t row);  // lowest index wins ties

}  // namespace moelab::num
