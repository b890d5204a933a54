#include "ldp/optim.hpp"

#include <cmath>

#include "ldp/errors.hpp"

namespace ldp {

Adam::Adam(std::vector<ad::Tensor> params, const AdamConfig& cfg)
    : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.lr <= 0.0) throw ConfigError("adam lr must be > 0");
    if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
        throw ConfigError("adam betas must be in [0, 1)");
    if (cfg_.eps <= 0.0) throw ConfigError("adam eps must be > 0");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        auto& p = params_[pi];
        auto data = p.mutable_data();
        const bool has_g = p.has_grad();
        auto g = has_g ? p.grad() : std::span<const double>{};
        auto& m = m_[pi];
        auto& v = v_[pi];
        for (size_t i = 0; i < data.size(); ++i) {
            const double gi = has_g ? g[i] : 0.0;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            double upd = cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            if (cfg_.weight_decay > 0.0) upd += cfg_.lr * cfg_.weight_decay * data[i];
            data[i] -= upd;
        }
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

}  // namespace ldp
