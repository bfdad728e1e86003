#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "divctl/tensor.hpp"

namespace divctl {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 3e-2;
};

// Per-element update masks keyed by parameter name; 0 leaves the element and
// its moments untouched for this step.
using UpdateMasks = std::unordered_map<std::string, std::vector<std::uint8_t>>;

// Decoupled weight decay Adam, PyTorch arithmetic order:
//   p *= 1 - lr * wd
//   m = b1 m + (1 - b1) g;  v = b2 v + (1 - b2) g^2
//   p -= lr / (1 - b1^t) * m / (sqrt(v) / sqrt(1 - b2^t) + eps)
class AdamW {
public:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> m;
        std::vector<double> v;
        bool frozen = false;
    };

    explicit AdamW(AdamWConfig config = {}) : config_(config) {}

    void add(std::string name, Tensor param, bool frozen = false);
    void step(double lr, const UpdateMasks* masks = nullptr);
    void zero_grad();

    std::uint64_t step_count() const { return step_; }
    void set_step_count(std::uint64_t s) { step_ = s; }
    const AdamWConfig& config() const { return config_; }
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }
    Slot* find(const std::string& name);

    // Number of optimizer-visible, non-frozen scalars.
    std::size_t trainable_count() const;

private:
    AdamWConfig config_;
    std::vector<Slot> slots_;
    std::uint64_t step_ = 0;
};

// lr(step) = base_lr * factor^(number of milestones <= step)
struct LrSchedule {
    double base_lr = 1e-3;
    std::vector<std::uint64_t> milestones;
    double factor = 0.4;

    double lr_at(std::uint64_t step) const;
};

}  // namespace divctl
