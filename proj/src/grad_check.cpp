#include "moelab/grad_check.hpp"

#include <cmath>
#include <vector>

namespace moelab::num {

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps) {
    Tensor probe(x.shape(), std::vector<Scalar>(x.data(), x.data() + x.numel()));
    probe.set_requires_grad(true);

    std::vector<Scalar> analytic;
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = f(probe);
        if (loss.numel() != 1) {
            throw ContractError("grad_check: f must be scalar-valued");
        }
        tape.backward(loss);
        // a parameter untouched by the loss (e.g. an unselected expert) has
        // no gradient buffer; its analytic gradient is zero
        analytic = probe.has_grad() ? probe.grad()
                                    : std::vector<Scalar>(probe.numel(), Scalar(0));
    }

    probe.set_requires_grad(false);
    double max_err = 0.0;
    for (int64_t i = 0; i < probe.numel(); ++i) {
        const Scalar saved = probe.data()[i];
        probe.data()[i] = saved + static_cast<Scalar>(eps);
        const double fp = f(probe).value();
        probe.data()[i] = saved - static_cast<Scalar>(eps);
        const double fm = f(probe).value();
        probe.data()[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("grad_check: non-finite value during probing");
        }
        const double central = (fp - fm) / (2.0 * eps);
        const double a = static_cast<double>(analytic[i]);
        const double err =
            std::abs(a - central) / (std::abs(a) + std::abs(central) + eps);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace moelab::num
