#include "agnn/optim.hpp"

#include <algorithm>
#include <cmath>

namespace agnn::ad {

Value ParameterStore::add(const std::string& name, Tensor init) {
    if (contains(name)) throw std::invalid_argument("ParameterStore: duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, Value(std::move(init), true));
    return entries_.back().second;
}

Value& ParameterStore::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter '" + name + "'");
    return entries_[it->second].second;
}

const Value& ParameterStore::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterStore: no parameter '" + name + "'");
    return entries_[it->second].second;
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += static_cast<std::size_t>(v.data().size());
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
}

std::vector<Tensor> ParameterStore::snapshot() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& [_, v] : entries_) out.push_back(v.data());
    return out;
}

void ParameterStore::restore(const std::vector<Tensor>& data) {
    if (data.size() != entries_.size()) throw std::invalid_argument("ParameterStore::restore: parameter count mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto& v = entries_[i].second;
        if (data[i].rows() != v.rows() || data[i].cols() != v.cols())
            throw ShapeError("restore(" + entries_[i].first + ")", v.data(), data[i]);
        v.data() = data[i];
    }
}

void adam_step(ParameterStore& params, AdamState& state) {
    for (auto& [name, v] : params)
        if (!v.grad().allFinite()) throw NumericError("adam_step: non-finite gradient in parameter '" + name + "'");

    if (state.first_moment.size() != params.size()) {
        state.first_moment.clear();
        state.second_moment.clear();
        for (auto& [_, v] : params) {
            state.first_moment.push_back(Tensor::Zero(v.rows(), v.cols()));
            state.second_moment.push_back(Tensor::Zero(v.rows(), v.cols()));
        }
    }

    const auto& cfg = state.config;
    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);

    std::size_t i = 0;
    for (auto& [_, v] : params) {
        auto& m = state.first_moment[i];
        auto& s = state.second_moment[i];
        ++i;
        const auto& g = v.grad();
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        s.array() = cfg.beta2 * s.array() + (1.0 - cfg.beta2) * g.array().square();
        v.data().array() -= cfg.learning_rate * (m.array() / c1) / ((s.array() / c2).sqrt() + cfg.epsilon);
        v.zero_grad();
    }
}

double GradCheckReport::worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.rel_error);
    return w;
}

GradCheckReport grad_check(const std::function<Value()>& build_loss, ParameterStore& params, double tol,
                           double step) {
    params.zero_grad();
    build_loss().backward();
    std::vector<Tensor> analytic;
    for (auto& [_, v] : params) analytic.push_back(v.grad());
    params.zero_grad();

    GradCheckReport report;
    report.tolerance = tol;
    std::size_t pi = 0;
    for (auto& [name, v] : params) {
        const Tensor& a = analytic[pi++];
        double max_abs = 0.0, scale = 0.0;
        for (Eigen::Index r = 0; r < v.rows(); ++r) {
            for (Eigen::Index c = 0; c < v.cols(); ++c) {
                const double saved = v.data()(r, c);
                v.data()(r, c) = saved + step;
                const double up = build_loss().item();
                v.data()(r, c) = saved - step;
                const double down = build_loss().item();
                v.data()(r, c) = saved;
                const double numeric = (up - down) / (2.0 * step);
                max_abs = std::max(max_abs, std::abs(numeric - a(r, c)));
                scale = std::max({scale, std::abs(numeric), std::abs(a(r, c))});
            }
        }
        GradCheckEntry e{name, max_abs, scale > 0.0 ? max_abs / scale : 0.0};
        if (e.rel_error > tol) report.failures.push_back(name);
        report.entries.push_back(std::move(e));
    }
    return report;
}

}  // namespace agnn::ad
