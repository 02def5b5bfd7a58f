#include "crowdctx/core/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crowdctx/core/errors.hpp"
#include "crowdctx/core/ops.hpp"

namespace crowdctx {

GradCheckResult check_gradient(const std::function<Tensor()>& loss_fn, Tensor input,
                               const GradCheckOptions& options) {
    if (!input.requires_grad()) throw ContractError("check_gradient: input does not require grad");

    input.zero_grad();
    backward(loss_fn());
    const std::vector<double> analytic(input.grad().begin(), input.grad().end());
    input.zero_grad();

    std::vector<std::size_t> order(input.numel());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t wanted =
        options.max_coords && options.max_coords < order.size() ? options.max_coords : order.size();
    if (wanted < order.size()) {
        std::mt19937_64 rng(options.seed);
        std::shuffle(order.begin(), order.end(), rng);
    }

    auto values = input.mutable_data();
    double diff2 = 0.0, ad2 = 0.0, fd2 = 0.0;
    std::size_t used = 0, skipped = 0;
    {
        NoGradGuard guard;
        std::vector<signed char> base;
        if (options.skip_kinks) {
            ops::KinkRecorder rec;
            loss_fn();
            base = rec.pattern();
        }
        for (auto i : order) {
            if (used == wanted) break;
            const double original = values[i];
            ops::KinkRecorder rec_up;
            values[i] = original + options.step;
            const double up = loss_fn().item();
            ops::KinkRecorder rec_down;
            values[i] = original - options.step;
            const double down = loss_fn().item();
            values[i] = original;
            if (options.skip_kinks && (rec_up.pattern() != base || rec_down.pattern() != base)) {
                ++skipped;
                continue;
            }
            const double numeric = (up - down) / (2.0 * options.step);
            diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
            ad2 += analytic[i] * analytic[i];
            fd2 += numeric * numeric;
            ++used;
        }
    }
    GradCheckResult r;
    r.autodiff_norm = std::sqrt(ad2);
    r.numeric_norm = std::sqrt(fd2);
    r.coords = used;
    r.skipped = skipped;
    r.relative_error = std::sqrt(diff2) / std::max({r.autodiff_norm, r.numeric_norm, options.floor});
    return r;
}

}  // namespace crowdctx
