#include "divctl/optim.hpp"

#include <algorithm>
#include <cmath>

#include "divctl/errors.hpp"

namespace divctl {

void AdamW::add(std::string name, Tensor param, bool frozen) {
    require(param.defined(), "AdamW::add: undefined parameter " + name);
    const std::size_t n = param.numel();
    slots_.push_back(Slot{std::move(name), std::move(param), std::vector<double>(n, 0.0),
                          std::vector<double>(n, 0.0), frozen});
}

AdamW::Slot* AdamW::find(const std::string& name) {
    for (auto& s : slots_) {
        if (s.name == name) {
            return &s;
        }
    }
    return nullptr;
}

void AdamW::zero_grad() {
    for (auto& s : slots_) {
        s.param.zero_grad();
    }
}

std::size_t AdamW::trainable_count() const {
    std::size_t n = 0;
    for (const auto& s : slots_) {
        if (!s.frozen) {
            n += s.param.numel();
        }
    }
    return n;
}

void AdamW::step(double lr, const UpdateMasks* masks) {
    ++step_;
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    const double step_size = lr / bc1;
    const double bc2_sqrt = std::sqrt(bc2);
    const double decay = 1.0 - lr * config_.weight_decay;

    for (auto& s : slots_) {
        if (s.frozen) {
            continue;
        }
        const std::size_t n = s.param.numel();
        require(s.m.size() == n && s.v.size() == n, "AdamW: moment buffers do not match " + s.name);
        const std::vector<std::uint8_t>* mask = nullptr;
        if (masks) {
            if (auto it = masks->find(s.name); it != masks->end()) {
                mask = &it->second;
                require(mask->size() == n, "AdamW: mask size mismatch for " + s.name);
            }
        }
        auto p = s.param.mutable_data();
        const bool has_grad = s.param.has_grad();
        auto g = s.param.grad();
        for (std::size_t i = 0; i < n; ++i) {
            if (mask && !(*mask)[i]) {
                continue;
            }
            const double gi = has_grad ? g[i] : 0.0;
            p[i] *= decay;
            s.m[i] = b1 * s.m[i] + (1.0 - b1) * gi;
            s.v[i] = b2 * s.v[i] + (1.0 - b2) * gi * gi;
            p[i] -= step_size * s.m[i] / (std::sqrt(s.v[i]) / bc2_sqrt + config_.eps);
        }
    }
}

double LrSchedule::lr_at(std::uint64_t step) const {
    const auto passed = std::count_if(milestones.begin(), milestones.end(),
                                      [step](std::uint64_t m) { return m <= step; });
    return base_lr * std::pow(factor, static_cast<double>(passed));
}

}  // namespace divctl
