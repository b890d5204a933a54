#pragma once

#include <cstddef>
#include <vector>

#include "ldp/tensor.hpp"

namespace ldp {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled, applied to the data directly
};

// Adam with bias correction. Holds first/second moment buffers per
// parameter; step() consumes whatever gradient the tape accumulated and
// updates parameter data in place.
class Adam {
  public:
    Adam(std::vector<ad::Tensor> params, const AdamConfig& cfg);

    // Parameters with no accumulated gradient are treated as having a zero
    // gradient (their moments still decay).
    void step();
    void zero_grad();
    size_t steps_taken() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

  private:
    std::vector<ad::Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamConfig cfg_;
    size_t t_ = 0;
};

}  // namespace ldp
