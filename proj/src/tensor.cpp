#include "moelab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace moelab::num {

namespace {

bool g_debug_checks = false;
thread_local Tape* g_active_tape = nullptr;

int64_t shape_product(const std::vector<int64_t>& shape) {
    int64_t p = 1;
    for (int64_t e : shape) {
        if (e <= 0) throw DimensionError("tensor extents must be positive");
        p *= e;
    }
    return p;
}

std::string shape_to_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             a.shape_str() + " vs " + b.shape_str());
    }
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                             t.shape_str());
    }
}

bool taping(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs) {
        if (t->tracked()) return true;
    }
    return false;
}

void maybe_check_finite(const Tensor& t, const char* op) {
    if (g_debug_checks) t.check_finite(op);
}

}  // namespace

void set_debug_checks(bool on) { g_debug_checks = on; }
bool debug_checks() { return g_debug_checks; }

// ---- TensorData -----------------------------------------------------------

namespace detail {

std::vector<Scalar>& TensorData::ensure_grad() {
    if (!grad) grad = std::make_unique<std::vector<Scalar>>(values.size(), Scalar(0));
    return *grad;
}

void TensorData::add_grad(const Scalar* g, int64_t n) {
    std::vector<Scalar>& dst = ensure_grad();
    for (int64_t i = 0; i < n; ++i) dst[i] += g[i];
}

}  // namespace detail

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() : d_(std::make_shared<detail::TensorData>()) {}

Tensor::Tensor(std::vector<int64_t> shape) : d_(std::make_shared<detail::TensorData>()) {
    const int64_t n = shape_product(shape);
    d_->shape = std::move(shape);
    d_->values.assign(n, Scalar(0));
}

Tensor::Tensor(std::vector<int64_t> shape, std::vector<Scalar> values)
    : d_(std::make_shared<detail::TensorData>()) {
    const int64_t n = shape_product(shape);
    if (n != static_cast<int64_t>(values.size())) {
        throw DimensionError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_to_str(shape));
    }
    d_->shape = std::move(shape);
    d_->values = std::move(values);
}

Tensor Tensor::scalar(Scalar v) { return Tensor({1}, {v}); }
Tensor Tensor::zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int64_t> shape, Scalar v) {
    Tensor t(std::move(shape));
    std::fill(t.d_->values.begin(), t.d_->values.end(), v);
    return t;
}

int64_t Tensor::extent(int64_t axis) const {
    if (axis < 0 || axis >= rank()) {
        throw DimensionError("axis " + std::to_string(axis) + " invalid for " + shape_str());
    }
    return d_->shape[axis];
}

int64_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("rows(): not rank-2: " + shape_str());
    return d_->shape[0];
}

int64_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("cols(): not rank-2: " + shape_str());
    return d_->shape[1];
}

std::string Tensor::shape_str() const { return shape_to_str(d_->shape); }

Scalar Tensor::value() const {
    if (numel() != 1) throw ContractError("value(): tensor is not scalar: " + shape_str());
    return d_->values[0];
}

Scalar Tensor::at(int64_t i) const { return d_->values.at(i); }
Scalar& Tensor::at(int64_t i) { return d_->values.at(i); }

Scalar Tensor::at(int64_t i, int64_t j) const {
    require_rank2(*this, "at");
    return d_->values.at(i * cols() + j);
}

Scalar& Tensor::at(int64_t i, int64_t j) {
    require_rank2(*this, "at");
    return d_->values.at(i * cols() + j);
}

Tensor& Tensor::set_requires_grad(bool on) {
    d_->requires_grad = on;
    return *this;
}

const std::vector<Scalar>& Tensor::grad() const {
    if (!d_->grad) throw ContractError("grad(): no gradient present");
    return *d_->grad;
}

void Tensor::check_finite(const std::string& where) const {
    for (Scalar v : d_->values) {
        if (!std::isfinite(v)) {
            throw NumericError(where + ": non-finite tensor value detected");
        }
    }
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape(uint64_t seed) : rng_(seed) {}

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = prev_; }

void Tape::record(std::vector<std::shared_ptr<detail::TensorData>> inputs,
                  std::shared_ptr<detail::TensorData> output,
                  std::function<void()> backward) {
    output->tracked = true;
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got " + loss.shape_str());
    }
    // Reset grads of intermediates (node outputs); leaf grads accumulate
    // across repeated calls.
    for (Node& n : nodes_) n.output->grad.reset();
    detail::TensorData* root = loss.impl();
    if (!root->tracked && !root->requires_grad) return;  // nothing reachable
    root->ensure_grad()[0] += Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output->grad) it->back();
    }
}

// ---- op helpers ------------------------------------------------------------

namespace {

// Gradient view of a tensor impl; null when the input does not need one.
Scalar* grad_dst(const std::shared_ptr<detail::TensorData>& d) {
    return d->ensure_grad().data();
}

}  // namespace

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (trans_a && trans_b) throw ContractError("matmul: trans_a && trans_b unsupported");
    const int64_t m = trans_a ? a.cols() : a.rows();
    const int64_t k = trans_a ? a.rows() : a.cols();
    const int64_t kb = trans_b ? b.cols() : b.rows();
    const int64_t n = trans_b ? b.rows() : b.cols();
    if (k != kb) {
        throw DimensionError("matmul: inner extents differ: " + a.shape_str() +
                             (trans_a ? "^T" : "") + " x " + b.shape_str() +
                             (trans_b ? "^T" : ""));
    }
    Tensor out({m, n});
    kernels::matmul(a.data(), b.data(), out.data(), m, k, n, trans_a, trans_b, false);
    if (MacCounter::enabled()) MacCounter::add(static_cast<uint64_t>(m) * k * n);
    maybe_check_finite(out, "matmul");

    if (taping({&a, &b})) {
        auto ad = a.share();
        auto bd = b.share();
        auto od = out.share();
        const bool need_a = a.tracked();
        const bool need_b = b.tracked();
        Tape::active()->record(
            {ad, bd}, od, [=]() {
                const Scalar* g = od->grad->data();
                if (need_a) {
                    // dA for C = op(A) op(B)
                    if (!trans_a && !trans_b) {
                        kernels::matmul(g, bd->values.data(), grad_dst(ad), m, n, k,
                                        false, true, true);
                    } else if (!trans_a && trans_b) {
                        kernels::matmul(g, bd->values.data(), grad_dst(ad), m, n, k,
                                        false, false, true);
                    } else {  // trans_a
                        // dA [k x m] = B * dC^T -> compute as (dC^T? ) use:
                        // dA = B_eff * g^T where B_eff rows over k.
                        // C = A^T B: dA[l,i] = sum_j B[l,j] g[i,j]
                        kernels::matmul(bd->values.data(), g, grad_dst(ad), k, n, m,
                                        false, true, true);
                    }
                }
                if (need_b) {
                    if (!trans_a && !trans_b) {
                        kernels::matmul(ad->values.data(), g, grad_dst(bd), k, m, n,
                                        true, false, true);
                    } else if (!trans_a && trans_b) {
                        // B stored [n x k]; dB[j,:] = sum_i g[i,j] A[i,:]
                        kernels::matmul(g, ad->values.data(), grad_dst(bd), n, m, k,
                                        true, false, true);
                    } else {  // trans_a
                        kernels::matmul(ad->values.data(), g, grad_dst(bd), k, m, n,
                                        false, false, true);
                    }
                }
            });
    }
    return out;
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    const int64_t n = a.numel();
    const Scalar* pa = a.data();
    const Scalar* pb = b.data();
    Scalar* po = out.data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    maybe_check_finite(out, "add");
    if (taping({&a, &b})) {
        auto ad = a.share(), bd = b.share(), od = out.share();
        const bool na = a.tracked(), nb = b.tracked();
        Tape::active()->record({ad, bd}, od, [=]() {
            const Scalar* g = od->grad->data();
            if (na) ad->add_grad(g, n);
            if (nb) bd->add_grad(g, n);
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (taping({&a, &b})) {
        auto ad = a.share(), bd = b.share(), od = out.share();
        const bool na = a.tracked(), nb = b.tracked();
        Tape::active()->record({ad, bd}, od, [=]() {
            const Scalar* g = od->grad->data();
            if (na) ad->add_grad(g, n);
            if (nb) {
                Scalar* dst = grad_dst(bd);
                for (int64_t i = 0; i < n; ++i) dst[i] -= g[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    maybe_check_finite(out, "mul");
    if (taping({&a, &b})) {
        auto ad = a.share(), bd = b.share(), od = out.share();
        const bool na = a.tracked(), nb = b.tracked();
        Tape::active()->record({ad, bd}, od, [=]() {
            const Scalar* g = od->grad->data();
            if (na) {
                Scalar* dst = grad_dst(ad);
                for (int64_t i = 0; i < n; ++i) dst[i] += g[i] * bd->values[i];
            }
            if (nb) {
                Scalar* dst = grad_dst(bd);
                for (int64_t i = 0; i < n; ++i) dst[i] += g[i] * ad->values[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, Scalar c) {
    Tensor out(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (taping({&a})) {
        auto ad = a.share(), od = out.share();
        Tape::active()->record({ad}, od, [=]() {
            const Scalar* g = od->grad->data();
            Scalar* dst = grad_dst(ad);
            for (int64_t i = 0; i < n; ++i) dst[i] += g[i] * c;
        });
    }
    return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    require_rank2(x, "add_row_bias");
    if (bias.rank() != 1 || bias.extent(0) != x.cols()) {
        throw DimensionError("add_row_bias: bias " + bias.shape_str() +
                             " does not match " + x.shape_str());
    }
    const int64_t r = x.rows(), c = x.cols();
    Tensor out({r, c});
    for (int64_t i = 0; i < r; ++i) {
        const Scalar* xr = x.data() + i * c;
        Scalar* orow = out.data() + i * c;
        for (int64_t j = 0; j < c; ++j) orow[j] = xr[j] + bias.data()[j];
    }
    if (taping({&x, &bias})) {
        auto xd = x.share(), bd = bias.share(), od = out.share();
        const bool nx = x.tracked(), nb = bias.tracked();
        Tape::active()->record({xd, bd}, od, [=]() {
            const Scalar* g = od->grad->data();
            if (nx) xd->add_grad(g, r * c);
            if (nb) {
                Scalar* dst = grad_dst(bd);
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < c; ++j) dst[j] += g[i * c + j];
            }
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > 0 ? x.data()[i] : Scalar(0);
    if (taping({&x})) {
        auto xd = x.share(), od = out.share();
        Tape::active()->record({xd}, od, [=]() {
            const Scalar* g = od->grad->data();
            Scalar* dst = grad_dst(xd);
            for (int64_t i = 0; i < n; ++i)
                if (xd->values[i] > 0) dst[i] += g[i];
        });
    }
    return out;
}

// ---- softmax ---------------------------------------------------------------

namespace {

struct AxisView {
    int64_t lanes;   // number of independent lanes
    int64_t len;     // lane length (extent of axis)
    int64_t stride;  // step between lane elements
    int64_t outer;   // step between outer blocks
    int64_t inner;   // lanes per outer block
};

AxisView axis_view(const std::vector<int64_t>& shape, int64_t axis) {
    int64_t inner = 1, outer = 1;
    for (size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    for (int64_t i = 0; i < axis; ++i) outer *= shape[i];
    AxisView v;
    v.len = shape[axis];
    v.stride = inner;
    v.inner = inner;
    v.outer = v.len * inner;
    v.lanes = outer * inner;
    return v;
}

// Lane start offset for lane index q given the view.
inline int64_t lane_start(const AxisView& v, int64_t q) {
    const int64_t o = q / v.inner;
    const int64_t i = q % v.inner;
    return o * v.outer + i;
}

}  // namespace

Tensor softmax(const Tensor& x, int64_t axis) {
    if (axis < 0 || axis >= x.rank()) {
        throw DimensionError("softmax: axis " + std::to_string(axis) +
                             " invalid for " + x.shape_str());
    }
    Tensor out(x.shape());
    // rank-2 row softmax is the hot path
    if (x.rank() == 2 && axis == 1) {
        kernels::softmax_rows(x.data(), out.data(), x.rows(), x.cols());
    } else {
        const AxisView v = axis_view(x.shape(), axis);
        std::vector<Scalar> lane(v.len);
        for (int64_t q = 0; q < v.lanes; ++q) {
            const int64_t s = lane_start(v, q);
            Scalar mx = x.data()[s];
            for (int64_t t = 1; t < v.len; ++t)
                mx = std::max(mx, x.data()[s + t * v.stride]);
            for (int64_t t = 0; t < v.len; ++t) {
                const Scalar e = std::exp(x.data()[s + t * v.stride] - mx);
                out.data()[s + t * v.stride] = e;
                lane[t] = e;
            }
            // value-ordered sum keeps the result permutation independent
            std::sort(lane.begin(), lane.end());
            Scalar sumv = 0;
            for (Scalar e : lane) sumv += e;
            for (int64_t t = 0; t < v.len; ++t) out.data()[s + t * v.stride] /= sumv;
        }
    }
    maybe_check_finite(out, "softmax");
    if (taping({&x})) {
        auto xd = x.share(), od = out.share();
        const AxisView v = axis_view(x.shape(), axis);
        Tape::active()->record({xd}, od, [=]() {
            const Scalar* g = od->grad->data();
            const Scalar* s = od->values.data();
            Scalar* dst = grad_dst(xd);
            for (int64_t q = 0; q < v.lanes; ++q) {
                const int64_t base = lane_start(v, q);
                Scalar dot = 0;
                for (int64_t t = 0; t < v.len; ++t) {
                    const int64_t i = base + t * v.stride;
                    dot += g[i] * s[i];
                }
                for (int64_t t = 0; t < v.len; ++t) {
                    const int64_t i = base + t * v.stride;
                    dst[i] += s[i] * (g[i] - dot);
                }
            }
        });
    }
    return out;
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
    Scalar acc = 0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += x.data()[i];
    Tensor out = Tensor::scalar(acc);
    if (taping({&x})) {
        auto xd = x.share(), od = out.share();
        const int64_t n = x.numel();
        Tape::active()->record({xd}, od, [=]() {
            const Scalar g = (*od->grad)[0];
            Scalar* dst = grad_dst(xd);
            for (int64_t i = 0; i < n; ++i) dst[i] += g;
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    const int64_t n = x.numel();
    Scalar acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += x.data()[i];
    Tensor out = Tensor::scalar(acc / static_cast<Scalar>(n));
    if (taping({&x})) {
        auto xd = x.share(), od = out.share();
        Tape::active()->record({xd}, od, [=]() {
            const Scalar g = (*od->grad)[0] / static_cast<Scalar>(n);
            Scalar* dst = grad_dst(xd);
            for (int64_t i = 0; i < n; ++i) dst[i] += g;
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<int64_t> shape) {
    const int64_t n = shape_product(shape);
    if (n != x.numel()) {
        throw DimensionError("reshape: cannot view " + x.shape_str() + " as " +
                             shape_to_str(shape));
    }
    Tensor out(std::move(shape), std::vector<Scalar>(x.data(), x.data() + n));
    if (taping({&x})) {
        auto xd = x.share(), od = out.share();
        Tape::active()->record({xd}, od, [=]() { xd->add_grad(od->grad->data(), n); });
    }
    return out;
}

// ---- gather / scatter --------------------------------------------------------

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx) {
    require_rank2(x, "gather_rows");
    if (idx.empty()) throw ContractError("gather_rows: empty index list");
    const int64_t c = x.cols();
    const int64_t r = x.rows();
    Tensor out({static_cast<int64_t>(idx.size()), c});
    for (size_t j = 0; j < idx.size(); ++j) {
        if (idx[j] < 0 || idx[j] >= r) {
            throw ContractError("gather_rows: index " + std::to_string(idx[j]) +
                                " out of range for " + x.shape_str());
        }
        std::memcpy(out.data() + j * c, x.data() + idx[j] * c, c * sizeof(Scalar));
    }
    if (taping({&x})) {
        auto xd = x.share(), od = out.share();
        auto indices = idx;
        Tape::active()->record({xd}, od, [=]() {
            const Scalar* g = od->grad->data();
            Scalar* dst = grad_dst(xd);
            for (size_t j = 0; j < indices.size(); ++j) {
                Scalar* row = dst + indices[j] * c;
                const Scalar* grow = g + j * c;
                for (int64_t t = 0; t < c; ++t) row[t] += grow[t];
            }
        });
    }
    return out;
}

Tensor scatter_rows(const Tensor& x, const std::vector<int64_t>& idx,
                    int64_t out_rows) {
    require_rank2(x, "scatter_rows");
    if (static_cast<int64_t>(idx.size()) != x.rows()) {
        throw ContractError("scatter_rows: index count does not match rows");
    }
    const int64_t c = x.cols();
    Tensor out({out_rows, c});
    for (size_t j = 0; j < idx.size(); ++j) {
        if (idx[j] < 0 || idx[j] >= out_rows) {
            throw ContractError("scatter_rows: index out of range");
        }
        Scalar* row = out.data() + idx[j] * c;
        const Scalar* xr = x.data() + j * c;
        for (int64_t t = 0; t < c; ++t) row[t] += xr[t];
    }
    if (taping({&x})) {
        auto xd = x.share(), od = out.share();
        auto indices = idx;
        Tape::active()->record({xd}, od, [=]() {
            const Scalar* g = od->grad->data();
            Scalar* dst = grad_dst(xd);
            for (size_t j = 0; j < indices.size(); ++j) {
                const Scalar* grow = g + indices[j] * c;
                Scalar* row = dst + j * c;
                for (int64_t t = 0; t < c; ++t) row[t] += grow[t];
            }
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, int64_t start, int64_t len) {
    require_rank2(x, "slice_rows");
    if (start < 0 || len <= 0 || start + len > x.rows()) {
        throw ContractError("slice_rows: range [" + std::to_string(start) + ", " +
                            std::to_string(start + len) + ") out of bounds for " +
                            x.shape_str());
    }
    const int64_t c = x.cols();
    Tensor out({len, c},
               std::vector<Scalar>(x.data() + start * c, x.data() + (start + len) * c));
    if (taping({&x})) {
        auto xd = x.share(), od = out.share();
        Tape::active()->record({xd}, od, [=]() {
            const Scalar* g = od->grad->data();
            Scalar* dst = grad_dst(xd) + start * c;
            for (int64_t i = 0; i < len * c; ++i) dst[i] += g[i];
        });
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const int64_t c = parts[0].cols();
    int64_t total = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.cols() != c) throw DimensionError("concat_rows: column mismatch");
        total += p.rows();
    }
    Tensor out({total, c});
    int64_t at = 0;
    for (const Tensor& p : parts) {
        std::memcpy(out.data() + at * c, p.data(), p.numel() * sizeof(Scalar));
        at += p.rows();
    }
    bool track = false;
    for (const Tensor& p : parts)
        if (p.tracked()) track = true;
    if (Tape::active() && track) {
        std::vector<std::shared_ptr<detail::TensorData>> ins;
        ins.reserve(parts.size());
        for (const Tensor& p : parts) ins.push_back(p.share());
        auto od = out.share();
        Tape::active()->record(ins, od, [ins, od, c]() {
            const Scalar* g = od->grad->data();
            int64_t at2 = 0;
            for (const auto& p : ins) {
                const int64_t n = static_cast<int64_t>(p->values.size());
                p->add_grad(g + at2, n);
                at2 += n;
            }
        });
    }
    return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_rank2(a, "concat_cols");
    require_rank2(b, "concat_cols");
    if (a.rows() != b.rows()) {
        throw DimensionError("concat_cols: row mismatch " + a.shape_str() + " vs " +
                             b.shape_str());
    }
    const int64_t n = a.rows(), p = a.cols(), q = b.cols();
    Tensor out({n, p + q});
    for (int64_t i = 0; i < n; ++i) {
        std::memcpy(out.data() + i * (p + q), a.data() + i * p, p * sizeof(Scalar));
        std::memcpy(out.data() + i * (p + q) + p, b.data() + i * q, q * sizeof(Scalar));
    }
    if (taping({&a, &b})) {
        auto ad = a.share(), bd = b.share(), od = out.share();
        const bool na = a.tracked(), nb = b.tracked();
        Tape::active()->record({ad, bd}, od, [=]() {
            const Scalar* g = od->grad->data();
            if (na) {
                Scalar* dst = grad_dst(ad);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < p; ++j) dst[i * p + j] += g[i * (p + q) + j];
            }
            if (nb) {
                Scalar* dst = grad_dst(bd);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < q; ++j) dst[i * q + j] += g[i * (p + q) + p + j];
            }
        });
    }
    return out;
}

Tensor concat_cols_broadcast(const Tensor& x, const Tensor& row) {
    require_rank2(x, "concat_cols_broadcast");
    require_rank2(row, "concat_cols_broadcast");
    if (row.rows() != 1) throw DimensionError("concat_cols_broadcast: row must be [1 x q]");
    const int64_t n = x.rows(), p = x.cols(), q = row.cols();
    Tensor out({n, p + q});
    for (int64_t i = 0; i < n; ++i) {
        std::memcpy(out.data() + i * (p + q), x.data() + i * p, p * sizeof(Scalar));
        std::memcpy(out.data() + i * (p + q) + p, row.data(), q * sizeof(Scalar));
    }
    if (taping({&x, &row})) {
        auto xd = x.share(), rd = row.share(), od = out.share();
        const bool nx = x.tracked(), nr = row.tracked();
        Tape::active()->record({xd, rd}, od, [=]() {
            const Scalar* g = od->grad->data();
            if (nx) {
                Scalar* dst = grad_dst(xd);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < p; ++j) dst[i * p + j] += g[i * (p + q) + j];
            }
            if (nr) {
                Scalar* dst = grad_dst(rd);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < q; ++j) dst[j] += g[i * (p + q) + p + j];
            }
        });
    }
    return out;
}

Tensor row_sum(const Tensor& x) {
    require_rank2(x, "row_sum");
    const int64_t r = x.rows(), c = x.cols();
    Tensor out({r, 1});
    for (int64_t i = 0; i < r; ++i) {
        Scalar acc = 0;
        for (int64_t j = 0; j < c; ++j) acc += x.data()[i * c + j];
        out.data()[i] = acc;
    }
    if (taping({&x})) {
        auto xd = x.share(), od = out.share();
        Tape::active()->record({xd}, od, [=]() {
            const Scalar* g = od->grad->data();
            Scalar* dst = grad_dst(xd);
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j) dst[i * c + j] += g[i];
        });
    }
    return out;
}

namespace {

void require_row_scalar(const Tensor& x, const Tensor& s, const char* op) {
    if (s.rank() != 2 || s.cols() != 1 || s.rows() != x.rows()) {
        throw DimensionError(std::string(op) + ": scale " + s.shape_str() +
                             " does not match " + x.shape_str());
    }
}

}  // namespace

Tensor mul_rowwise(const Tensor& x, const Tensor& s) {
    require_rank2(x, "mul_rowwise");
    require_row_scalar(x, s, "mul_rowwise");
    const int64_t r = x.rows(), c = x.cols();
    Tensor out({r, c});
    for (int64_t i = 0; i < r; ++i) {
        const Scalar v = s.data()[i];
        for (int64_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] * v;
    }
    if (taping({&x, &s})) {
        auto xd = x.share(), sd = s.share(), od = out.share();
        const bool nx = x.tracked(), ns = s.tracked();
        Tape::active()->record({xd, sd}, od, [=]() {
            const Scalar* g = od->grad->data();
            if (nx) {
                Scalar* dst = grad_dst(xd);
                for (int64_t i = 0; i < r; ++i) {
                    const Scalar v = sd->values[i];
                    for (int64_t j = 0; j < c; ++j) dst[i * c + j] += g[i * c + j] * v;
                }
            }
            if (ns) {
                Scalar* dst = grad_dst(sd);
                for (int64_t i = 0; i < r; ++i) {
                    Scalar acc = 0;
                    for (int64_t j = 0; j < c; ++j)
                        acc += g[i * c + j] * xd->values[i * c + j];
                    dst[i] += acc;
                }
            }
        });
    }
    return out;
}

Tensor div_rowwise(const Tensor& x, const Tensor& s) {
    require_rank2(x, "div_rowwise");
    require_row_scalar(x, s, "div_rowwise");
    const int64_t r = x.rows(), c = x.cols();
    Tensor out({r, c});
    for (int64_t i = 0; i < r; ++i) {
        const Scalar inv = Scalar(1) / s.data()[i];
        for (int64_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] * inv;
    }
    maybe_check_finite(out, "div_rowwise");
    if (taping({&x, &s})) {
        auto xd = x.share(), sd = s.share(), od = out.share();
        const bool nx = x.tracked(), ns = s.tracked();
        Tape::active()->record({xd, sd}, od, [=]() {
            const Scalar* g = od->grad->data();
            const Scalar* y = od->values.data();
            if (nx) {
                Scalar* dst = grad_dst(xd);
                for (int64_t i = 0; i < r; ++i) {
                    const Scalar inv = Scalar(1) / sd->values[i];
                    for (int64_t j = 0; j < c; ++j) dst[i * c + j] += g[i * c + j] * inv;
                }
            }
            if (ns) {
                Scalar* dst = grad_dst(sd);
                for (int64_t i = 0; i < r; ++i) {
                    Scalar acc = 0;
                    for (int64_t j = 0; j < c; ++j) acc += g[i * c + j] * y[i * c + j];
                    dst[i] -= acc / sd->values[i];
                }
            }
        });
    }
    return out;
}

Tensor gather_cells(const Tensor& x, const std::vector<int64_t>& row_idx,
                    const std::vector<int64_t>& col_idx) {
    require_rank2(x, "gather_cells");
    if (row_idx.size() != col_idx.size() || row_idx.empty()) {
        throw ContractError("gather_cells: bad index lists");
    }
    const int64_t c = x.cols();
    const int64_t m = static_cast<int64_t>(row_idx.size());
    Tensor out({m, 1});
    for (int64_t i = 0; i < m; ++i) {
        if (row_idx[i] < 0 || row_idx[i] >= x.rows() || col_idx[i] < 0 || col_idx[i] >= c) {
            throw ContractError("gather_cells: index out of range");
        }
        out.data()[i] = x.data()[row_idx[i] * c + col_idx[i]];
    }
    if (taping({&x})) {
        auto xd = x.share(), od = out.share();
        auto ri = row_idx;
        auto ci = col_idx;
        Tape::active()->record({xd}, od, [=]() {
            const Scalar* g = od->grad->data();
            Scalar* dst = grad_dst(xd);
            for (int64_t i = 0; i < m; ++i) dst[ri[i] * c + ci[i]] += g[i];
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, double rate) {
    if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1)");
    Tape* tape = Tape::active();
    if (rate == 0.0 || !tape) return x;
    const int64_t n = x.numel();
    const Scalar keep = Scalar(1) - static_cast<Scalar>(rate);
    auto mask = std::make_shared<std::vector<uint8_t>>(n);
    std::bernoulli_distribution bern(keep);
    for (int64_t i = 0; i < n; ++i) (*mask)[i] = bern(tape->rng()) ? 1 : 0;
    Tensor out(x.shape());
    const Scalar inv = Scalar(1) / keep;
    for (int64_t i = 0; i < n; ++i)
        out.data()[i] = (*mask)[i] ? x.data()[i] * inv : Scalar(0);
    if (x.tracked()) {
        auto xd = x.share(), od = out.share();
        tape->record({xd}, od, [=]() {
            const Scalar* g = od->grad->data();
            Scalar* dst = grad_dst(xd);
            for (int64_t i = 0; i < n; ++i)
                if ((*mask)[i]) dst[i] += g[i] * inv;
        });
    }
    return out;
}

// ---- layer norm --------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Scalar eps) {
    require_rank2(x, "layer_norm");
    const int64_t r = x.rows(), c = x.cols();
    if (gain.rank() != 1 || gain.extent(0) != c || bias.rank() != 1 || bias.extent(0) != c) {
        throw DimensionError("layer_norm: affine params do not match " + x.shape_str());
    }
    Tensor out({r, c});
    auto xhat = std::make_shared<std::vector<Scalar>>(r * c);
    auto inv_std = std::make_shared<std::vector<Scalar>>(r);
    for (int64_t i = 0; i < r; ++i) {
        const Scalar* xr = x.data() + i * c;
        Scalar mu = 0;
        for (int64_t j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<Scalar>(c);
        Scalar var = 0;
        for (int64_t j = 0; j < c; ++j) {
            const Scalar d = xr[j] - mu;
            var += d * d;
        }
        var /= static_cast<Scalar>(c);
        const Scalar is = Scalar(1) / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (int64_t j = 0; j < c; ++j) {
            const Scalar h = (xr[j] - mu) * is;
            (*xhat)[i * c + j] = h;
            out.data()[i * c + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    maybe_check_finite(out, "layer_norm");
    if (taping({&x, &gain, &bias})) {
        auto xd = x.share(), gd = gain.share(), bd = bias.share(), od = out.share();
        const bool nx = x.tracked(), ng = gain.tracked(), nb = bias.tracked();
        Tape::active()->record({xd, gd, bd}, od, [=]() {
            const Scalar* g = od->grad->data();
            for (int64_t i = 0; i < r; ++i) {
                const Scalar* grow = g + i * c;
                const Scalar* h = xhat->data() + i * c;
                if (ng) {
                    Scalar* dst = grad_dst(gd);
                    for (int64_t j = 0; j < c; ++j) dst[j] += grow[j] * h[j];
                }
                if (nb) {
                    Scalar* dst = grad_dst(bd);
                    for (int64_t j = 0; j < c; ++j) dst[j] += grow[j];
                }
                if (nx) {
                    Scalar m1 = 0, m2 = 0;
                    for (int64_t j = 0; j < c; ++j) {
                        const Scalar gg = grow[j] * gd->values[j];
                        m1 += gg;
                        m2 += gg * h[j];
                    }
                    m1 /= static_cast<Scalar>(c);
                    m2 /= static_cast<Scalar>(c);
                    Scalar* dst = grad_dst(xd) + i * c;
                    const Scalar is = (*inv_std)[i];
                    for (int64_t j = 0; j < c; ++j) {
                        const Scalar gg = grow[j] * gd->values[j];
                        dst[j] += (gg - m1 - h[j] * m2) * is;
                    }
                }
            }
        });
    }
    return out;
}

// ---- cross entropy -------------------------------------------------------------

Tensor cross_entropy_sum(const Tensor& logits, const std::vector<int32_t>& targets,
                         const std::vector<uint8_t>& mask, double smoothing) {
    require_rank2(logits, "cross_entropy_sum");
    const int64_t n = logits.rows(), v = logits.cols();
    if (static_cast<int64_t>(targets.size()) != n ||
        static_cast<int64_t>(mask.size()) != n) {
        throw ContractError("cross_entropy_sum: targets/mask size mismatch");
    }
    if (smoothing < 0.0 || smoothing >= 1.0) {
        throw ContractError("cross_entropy_sum: smoothing must be in [0, 1)");
    }
    const Scalar alpha = static_cast<Scalar>(smoothing);
    Scalar total = 0;
    std::vector<Scalar> lse(n);
    for (int64_t i = 0; i < n; ++i) {
        if (!mask[i]) continue;
        if (targets[i] < 0 || targets[i] >= v) {
            throw DataError("cross_entropy_sum: target id " + std::to_string(targets[i]) +
                            " out of vocabulary range at row " + std::to_string(i));
        }
        const Scalar* row = logits.data() + i * v;
        Scalar mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        Scalar se = 0, sl = 0;
        for (int64_t j = 0; j < v; ++j) {
            se += std::exp(row[j] - mx);
            sl += row[j];
        }
        const Scalar l = mx + std::log(se);
        lse[i] = l;
        total += l - (Scalar(1) - alpha) * row[targets[i]] -
                 alpha * sl / static_cast<Scalar>(v);
    }
    Tensor out = Tensor::scalar(total);
    if (!std::isfinite(total)) throw NumericError("cross_entropy_sum: non-finite loss");
    if (taping({&logits})) {
        auto ld = logits.share(), od = out.share();
        auto tg = targets;
        auto mk = mask;
        auto lse_s = std::make_shared<std::vector<Scalar>>(std::move(lse));
        Tape::active()->record({ld}, od, [=]() {
            const Scalar g = (*od->grad)[0];
            Scalar* dst = grad_dst(ld);
            for (int64_t i = 0; i < n; ++i) {
                if (!mk[i]) continue;
                const Scalar* row = ld->values.data() + i * v;
                Scalar* drow = dst + i * v;
                const Scalar l = (*lse_s)[i];
                for (int64_t j = 0; j < v; ++j) {
                    const Scalar p = std::exp(row[j] - l);
                    Scalar q = alpha / static_cast<Scalar>(v);
                    if (j == tg[i]) q += Scalar(1) - alpha;
                    drow[j] += g * (p - q);
                }
            }
        });
    }
    return out;
}

int64_t argmax_row(const Tensor& x, int64_t row) {
    require_rank2(x, "argmax_row");
    const int64_t c = x.cols();
    const Scalar* r = x.data() + row * c;
    int64_t best = 0;
    for (int64_t j = 1; j < c; ++j)
        if (r[j] > r[best]) best = j;
    return best;
}

}  // namespace moelab::num
