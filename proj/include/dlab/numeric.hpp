#pragma once

#include <cmath>
#include <span>

namespace dlab {

// Neumaier-compensated accumulator; reductions that feed reported means go
// through this so summation order does not leak into the output.
class KahanSum {
public:
    void add(double v) {
        double t = sum_ + v;
        if (std::fabs(sum_) >= std::fabs(v)) {
            comp_ += (sum_ - t) + v;
        } else {
            comp_ += (v - t) + sum_;
        }
        sum_ = t;
    }
    double value() const { return sum_ + comp_; }

private:
    double sum_  = 0.0;
    double comp_ = 0.0;
};

inline double compensated_sum(std::span<const double> values) {
    KahanSum s;
    for (double v : values) s.add(v);
    return s.value();
}

inline double compensated_mean(std::span<const double> values) {
    return values.empty() ? 0.0 : compensated_sum(values) / static_cast<double>(values.size());
}

}  // namespace dlab
