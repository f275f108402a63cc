#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "apd/autodiff.hpp"
#include "apd/errors.hpp"

namespace apd {

// Plain SGD with momentum over a fixed parameter list.
class SgdMomentum {
public:
    SgdMomentum(std::vector<ad::Var> params, double momentum)
        : params_(std::move(params)), momentum_(momentum) {
        if (momentum_ < 0.0 || momentum_ >= 1.0)
            throw config_error("sgd: momentum must be in [0,1)");
        for (const auto& p : params_)
            velocity_.emplace_back(Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols()));
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    void step(double lr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            velocity_[i] = momentum_ * velocity_[i] + params_[i]->grad_or_zero();
            params_[i]->value -= lr * velocity_[i];
        }
    }

private:
    std::vector<ad::Var> params_;
    std::vector<Eigen::MatrixXd> velocity_;
    double momentum_;
};

// Linear warmup from warmup_start to base_lr across epoch 0, then cosine
// decay to 0 over the remaining epochs.
struct LrSchedule {
    double base_lr = 0.0035;
    int epochs = 50;
    int batches_per_epoch = 1;
    double warmup_start = 1e-5;

    double at(int epoch, int batch) const {
        if (epoch < 0 || epoch >= epochs) throw config_error("lr schedule: epoch out of range");
        if (epoch == 0) {
            if (batches_per_epoch <= 1) return base_lr;
            const double frac = static_cast<double>(batch) / (batches_per_epoch - 1);
            return warmup_start + frac * (base_lr - warmup_start);
        }
        const double progress =
            (static_cast<double>(epoch - 1) + static_cast<double>(batch) / batches_per_epoch) /
            std::max(1, epochs - 1);
        return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
    }
};

}  // namespace apd
