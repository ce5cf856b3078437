#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "agnn/autodiff.hpp"

namespace agnn::ad {

/// Named trainable leaves, kept in insertion order so iteration (and thus
/// optimizer updates and serialization) is deterministic.
class ParameterStore {
public:
    /// Returns a handle sharing the stored leaf.
    Value add(const std::string& name, Tensor init);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Value& at(const std::string& name);
    const Value& at(const std::string& name) const;

    std::size_t size() const { return entries_.size(); }
    std::size_t scalar_count() const;
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    void zero_grad();

    /// Copies of all parameter data, in store order.
    std::vector<Tensor> snapshot() const;
    void restore(const std::vector<Tensor>& data);

private:
    std::vector<std::pair<std::string, Value>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct AdamConfig {
    double learning_rate = 0.0005;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    AdamConfig config;
    std::int64_t step = 0;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
};

/// One bias-corrected Adam update over every parameter, then zeroes grads.
/// Throws NumericError naming the parameter if any gradient is not finite;
/// in that case nothing is updated.
void adam_step(ParameterStore& params, AdamState& state);

struct GradCheckEntry {
    std::string name;
    double max_abs_error = 0.0;
    // max |analytic - numeric| over the tensor, divided by the largest
    // gradient magnitude (either route) in the same tensor; 0 when both
    // gradients vanish identically.
    double rel_error = 0.0;
};

struct GradCheckReport {
    double tolerance = 0.0;
    std::vector<GradCheckEntry> entries;
    std::vector<std::string> failures;

    bool ok() const { return failures.empty(); }
    double worst() const;
};

/// Compares reverse-mode gradients against central finite differences.
/// `build_loss` must be deterministic: it is re-run twice per scalar.
GradCheckReport grad_check(const std::function<Value()>& build_loss, ParameterStore& params, double tol,
                           double step = 1e-6);

}  // namespace agnn::ad
