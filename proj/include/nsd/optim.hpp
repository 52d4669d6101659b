#pragma once

#include <string>
#include <vector>

#include "nsd/tensor.hpp"

namespace nsd {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam over named parameter groups. step() consumes and
// zeroes the grads; a parameter without a populated grad is an error.
class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void add_param(const std::string& name, Tensor t, double lr_scale = 1.0);

    void step();
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    long step_count() const { return step_; }
    void set_step_count(long s) { step_ = s; }

    std::size_t size() const { return slots_.size(); }

    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> m, v;
        double lr_scale;
    };
    std::vector<Slot>& slots() { return slots_; }

    // Rounds params and moments through f32. Applied at every checkpoint
    // boundary so a resumed run is bit-identical to an uninterrupted one.
    void quantize_f32();

  private:
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    long step_ = 0;
};

// Cosine decay from lr0 to lr0*floor_frac across total steps.
double cosine_lr(double lr0, long step, long total, double floor_frac = 0.01);

}  // namespace nsd
