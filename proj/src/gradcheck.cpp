#include "ldp/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ldp/errors.hpp"

namespace ldp::ad {

namespace {

void note(GradCheckReport& rep, double analytic, double fd, size_t param, size_t coord) {
    if (!std::isfinite(analytic) || !std::isfinite(fd)) {
        throw NumericError("grad_check: non-finite gradient estimate");
    }
    double diff = std::fabs(analytic - fd);
    double rel = diff / std::max(1.0, std::fabs(analytic));
    if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.max_abs_diff = diff;
        rep.worst_param = param;
        rep.worst_coord = coord;
    }
    ++rep.coords_checked;
}

double eval_scalar(const Tensor& t) {
    if (t.numel() != 1) {
        throw ContractError("grad_check: function must be scalar-valued");
    }
    return t.value();
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0,
                           double h) {
    if (h <= 0.0) {
        throw ConfigError("grad_check: step h must be positive");
    }
    Tape tape;
    Tensor x = tape.var(x0.shape(), std::vector<double>(x0.data().begin(), x0.data().end()));
    Tensor loss = f(x);
    eval_scalar(loss);
    tape.backward(loss);
    std::vector<double> analytic(x.grad().begin(), x.grad().end());

    GradCheckReport rep;
    NoGradGuard ng;
    Tensor probe = x0.detach();
    auto pd = probe.mutable_data();
    for (size_t i = 0; i < pd.size(); ++i) {
        double saved = pd[i];
        pd[i] = saved + h;
        double fp = eval_scalar(f(probe));
        pd[i] = saved - h;
        double fm = eval_scalar(f(probe));
        pd[i] = saved;
        note(rep, analytic[i], (fp - fm) / (2.0 * h), 0, i);
    }
    return rep;
}

GradCheckReport grad_check_params(const std::function<Tensor()>& loss_fn,
                                  std::vector<Tensor>& params,
                                  const std::vector<std::pair<size_t, size_t>>& coords, double h) {
    if (h <= 0.0) {
        throw ConfigError("grad_check: step h must be positive");
    }
    if (coords.empty()) {
        throw ContractError("grad_check: no coordinates to check");
    }
    Tape tape;
    for (auto& p : params) {
        p.zero_grad();
        tape.watch(p);
    }
    Tensor loss = loss_fn();
    eval_scalar(loss);
    tape.backward(loss);

    GradCheckReport rep;
    NoGradGuard ng;
    for (auto [pi, ci] : coords) {
        if (pi >= params.size() || ci >= params[pi].numel()) {
            throw ContractError("grad_check: coordinate out of range");
        }
        double analytic = params[pi].grad()[ci];
        auto pd = params[pi].mutable_data();
        double saved = pd[ci];
        pd[ci] = saved + h;
        double fp = eval_scalar(loss_fn());
        pd[ci] = saved - h;
        double fm = eval_scalar(loss_fn());
        pd[ci] = saved;
        note(rep, analytic, (fp - fm) / (2.0 * h), pi, ci);
    }
    return rep;
}

std::vector<std::pair<size_t, size_t>> sample_param_coords(const std::vector<Tensor>& params,
                                                           size_t n, Rng& rng) {
    size_t total = 0;
    for (const auto& p : params) total += p.numel();
    if (total == 0 || n == 0) {
        throw ContractError("sample_param_coords: nothing to sample");
    }
    n = std::min(n, total);
    // Sample distinct flat offsets, then map into (param, coord) pairs.
    std::vector<uint64_t> picks;
    picks.reserve(n);
    while (picks.size() < n) {
        uint64_t cand = rng.below(total);
        if (std::find(picks.begin(), picks.end(), cand) == picks.end()) {
            picks.push_back(cand);
        }
    }
    std::vector<std::pair<size_t, size_t>> coords;
    coords.reserve(n);
    for (uint64_t flat : picks) {
        size_t pi = 0;
        uint64_t rem = flat;
        while (rem >= params[pi].numel()) {
            rem -= params[pi].numel();
            ++pi;
        }
        coords.emplace_back(pi, static_cast<size_t>(rem));
    }
    return coords;
}

}  // namespace ldp::ad
