#include "agnn/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace agnn::ad {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};

std::shared_ptr<detail::Node> new_node(Tensor data, bool requires_grad, bool zero_grad = true) {
    auto n = std::make_shared<detail::Node>();
    if (zero_grad) n->grad = Tensor::Zero(data.rows(), data.cols());
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    n->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
    return n;
}

void require_same_shape(const char* op, const Value& a, const Value& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(op, a.data(), b.data());
}

// Parent accessors used inside backward closures.
inline detail::Node& parent(detail::Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

std::string shape_string(const Tensor& t) {
    return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

ShapeError::ShapeError(const std::string& op, const Tensor& a, const Tensor& b)
    : std::invalid_argument(op + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b)) {}

ShapeError::ShapeError(const std::string& op, const std::string& what)
    : std::invalid_argument(op + ": " + what) {}

Value::Value() : node_(new_node(Tensor::Zero(1, 1), false)) {}

Value::Value(Tensor data, bool requires_grad) : node_(new_node(std::move(data), requires_grad)) {}

Value Value::scalar(double v, bool requires_grad) {
    Tensor t(1, 1);
    t(0, 0) = v;
    return Value(std::move(t), requires_grad);
}

double Value::item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item", "expected 1x1, got " + shape_string(data()));
    return data()(0, 0);
}

void Value::zero_grad() { node_->grad.setZero(rows(), cols()); }

Value Value::make(Tensor data, const char* op, std::vector<Value> parents,
                  std::function<void(detail::Node&)> backward_fn) {
    bool needs = std::any_of(parents.begin(), parents.end(), [](const Value& p) { return p.requires_grad(); });
    Value out(new_node(std::move(data), needs, false));
    out.node_->op = op;
    if (needs) {
        out.node_->parents.reserve(parents.size());
        for (auto& p : parents) out.node_->parents.push_back(p.node_);
        out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
}

void Value::backward() {
    if (rows() != 1 || cols() != 1)
        throw ShapeError("backward", "loss must be scalar, got " + shape_string(data()));
    if (!requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{node_.get()};
    while (!stack.empty()) {
        detail::Node* n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (auto& p : n->parents)
            if (p->requires_grad && !seen.count(p.get())) stack.push_back(p.get());
    }
    // Creation order is a topological order: parents always predate children.
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->seq > b->seq; });

    for (auto* n : order)
        if (n->backward_fn) n->grad.setZero(n->data.rows(), n->data.cols());
    node_->grad(0, 0) += 1.0;
    for (auto* n : order)
        if (n->backward_fn) n->backward_fn(*n);
}

Value constant(Tensor data) { return Value(std::move(data), false); }

Value zeros(Eigen::Index rows, Eigen::Index cols) { return constant(Tensor::Zero(rows, cols)); }

Value matmul(const Value& a, const Value& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul", a.data(), b.data());
    Tensor out = a.data() * b.data();
    return Value::make(std::move(out), "matmul", {a, b}, [](detail::Node& n) {
        auto& pa = parent(n, 0);
        auto& pb = parent(n, 1);
        if (pa.requires_grad) pa.grad.noalias() += n.grad * pb.data.transpose();
        if (pb.requires_grad) pb.grad.noalias() += pa.data.transpose() * n.grad;
    });
}

Value add(const Value& a, const Value& b) {
    require_same_shape("add", a, b);
    return Value::make(a.data() + b.data(), "add", {a, b}, [](detail::Node& n) {
        for (auto& p : n.parents)
            if (p->requires_grad) p->grad += n.grad;
    });
}

Value sub(const Value& a, const Value& b) {
    require_same_shape("sub", a, b);
    return Value::make(a.data() - b.data(), "sub", {a, b}, [](detail::Node& n) {
        if (parent(n, 0).requires_grad) parent(n, 0).grad += n.grad;
        if (parent(n, 1).requires_grad) parent(n, 1).grad -= n.grad;
    });
}

Value mul(const Value& a, const Value& b) {
    require_same_shape("mul", a, b);
    Tensor out = a.data().cwiseProduct(b.data());
    return Value::make(std::move(out), "mul", {a, b}, [](detail::Node& n) {
        auto& pa = parent(n, 0);
        auto& pb = parent(n, 1);
        if (pa.requires_grad) pa.grad += n.grad.cwiseProduct(pb.data);
        if (pb.requires_grad) pb.grad += n.grad.cwiseProduct(pa.data);
    });
}

Value scale(const Value& a, double s) {
    return Value::make(a.data() * s, "scale", {a}, [s](detail::Node& n) { parent(n, 0).grad += n.grad * s; });
}

Value add_scalar(const Value& a, double s) {
    Tensor out = a.data().array() + s;
    return Value::make(std::move(out), "add_scalar", {a}, [](detail::Node& n) { parent(n, 0).grad += n.grad; });
}

Value add_row(const Value& a, const Value& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row", a.data(), row.data());
    Tensor out = a.data().rowwise() + row.data().row(0);
    return Value::make(std::move(out), "add_row", {a, row}, [](detail::Node& n) {
        if (parent(n, 0).requires_grad) parent(n, 0).grad += n.grad;
        if (parent(n, 1).requires_grad) parent(n, 1).grad += n.grad.colwise().sum();
    });
}

Value square(const Value& a) {
    Tensor out = a.data().array().square();
    return Value::make(std::move(out), "square", {a}, [](detail::Node& n) {
        auto& p = parent(n, 0);
        p.grad.array() += 2.0 * n.grad.array() * p.data.array();
    });
}

Value exp(const Value& a) {
    Tensor out = a.data().array().exp();
    return Value::make(std::move(out), "exp", {a}, [](detail::Node& n) {
        parent(n, 0).grad.array() += n.grad.array() * n.data.array();
    });
}

Value sigmoid(const Value& a) {
    Tensor out = a.data().unaryExpr([](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
    });
    return Value::make(std::move(out), "sigmoid", {a}, [](detail::Node& n) {
        parent(n, 0).grad.array() += n.grad.array() * n.data.array() * (1.0 - n.data.array());
    });
}

Value leaky_relu(const Value& a, double slope) {
    Tensor out = a.data().unaryExpr([slope](double x) { return x >= 0 ? x : slope * x; });
    return Value::make(std::move(out), "leaky_relu", {a}, [slope](detail::Node& n) {
        auto& p = parent(n, 0);
        p.grad.array() += n.grad.array() * p.data.array().unaryExpr([slope](double x) { return x >= 0 ? 1.0 : slope; });
    });
}

Value concat_cols(const Value& a, const Value& b) {
    if (a.rows() != b.rows()) throw ShapeError("concat_cols", a.data(), b.data());
    Tensor out(a.rows(), a.cols() + b.cols());
    out << a.data(), b.data();
    const Eigen::Index split = a.cols();
    return Value::make(std::move(out), "concat_cols", {a, b}, [split](detail::Node& n) {
        auto& pa = parent(n, 0);
        auto& pb = parent(n, 1);
        if (pa.requires_grad) pa.grad += n.grad.leftCols(split);
        if (pb.requires_grad) pb.grad += n.grad.rightCols(n.grad.cols() - split);
    });
}

Value concat_rows(const Value& a, const Value& b) {
    if (a.cols() != b.cols()) throw ShapeError("concat_rows", a.data(), b.data());
    Tensor out(a.rows() + b.rows(), a.cols());
    out << a.data(), b.data();
    const Eigen::Index split = a.rows();
    return Value::make(std::move(out), "concat_rows", {a, b}, [split](detail::Node& n) {
        auto& pa = parent(n, 0);
        auto& pb = parent(n, 1);
        if (pa.requires_grad) pa.grad += n.grad.topRows(split);
        if (pb.requires_grad) pb.grad += n.grad.bottomRows(n.grad.rows() - split);
    });
}

Value gather_rows(const Value& a, std::span<const Eigen::Index> rows) {
    Tensor out(static_cast<Eigen::Index>(rows.size()), a.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= a.rows())
            throw ShapeError("gather_rows", "row " + std::to_string(rows[r]) + " out of range for " + shape_string(a.data()));
        out.row(static_cast<Eigen::Index>(r)) = a.data().row(rows[r]);
    }
    std::vector<Eigen::Index> idx(rows.begin(), rows.end());
    return Value::make(std::move(out), "gather_rows", {a}, [idx = std::move(idx)](detail::Node& n) {
        auto& p = parent(n, 0);
        for (std::size_t r = 0; r < idx.size(); ++r) p.grad.row(idx[r]) += n.grad.row(static_cast<Eigen::Index>(r));
    });
}

Value sum(const Value& a) {
    Tensor out(1, 1);
    out(0, 0) = a.data().sum();
    return Value::make(std::move(out), "sum", {a}, [](detail::Node& n) { parent(n, 0).grad.array() += n.grad(0, 0); });
}

Value mean_rows(const Value& a) {
    if (a.rows() == 0) throw ShapeError("mean_rows", "empty set");
    Tensor out = a.data().colwise().mean();
    const double inv = 1.0 / static_cast<double>(a.rows());
    return Value::make(std::move(out), "mean_rows", {a}, [inv](detail::Node& n) {
        auto& p = parent(n, 0);
        p.grad.rowwise() += n.grad.row(0) * inv;
    });
}

Value segment_mean(const Value& a, std::span<const Eigen::Index> offsets) {
    if (offsets.empty() || offsets.front() != 0 || offsets.back() != a.rows())
        throw ShapeError("segment_mean", "offsets must run from 0 to " + std::to_string(a.rows()));
    const auto groups = static_cast<Eigen::Index>(offsets.size() - 1);
    Tensor out = Tensor::Zero(groups, a.cols());
    for (Eigen::Index g = 0; g < groups; ++g) {
        const Eigen::Index lo = offsets[g], hi = offsets[g + 1];
        if (hi < lo) throw ShapeError("segment_mean", "offsets must be non-decreasing");
        if (hi > lo) out.row(g) = a.data().middleRows(lo, hi - lo).colwise().sum() / static_cast<double>(hi - lo);
    }
    std::vector<Eigen::Index> off(offsets.begin(), offsets.end());
    return Value::make(std::move(out), "segment_mean", {a}, [off = std::move(off)](detail::Node& n) {
        auto& p = parent(n, 0);
        for (std::size_t g = 0; g + 1 < off.size(); ++g) {
            const Eigen::Index lo = off[g], hi = off[g + 1];
            if (hi == lo) continue;
            const double inv = 1.0 / static_cast<double>(hi - lo);
            p.grad.middleRows(lo, hi - lo).rowwise() += n.grad.row(static_cast<Eigen::Index>(g)) * inv;
        }
    });
}

Value row_dot(const Value& a, const Value& b) {
    require_same_shape("row_dot", a, b);
    Tensor out = a.data().cwiseProduct(b.data()).rowwise().sum();
    return Value::make(std::move(out), "row_dot", {a, b}, [](detail::Node& n) {
        auto& pa = parent(n, 0);
        auto& pb = parent(n, 1);
        const Eigen::VectorXd g = n.grad.col(0);
        if (pa.requires_grad) pa.grad.array() += pb.data.array().colwise() * g.array();
        if (pb.requires_grad) pb.grad.array() += pa.data.array().colwise() * g.array();
    });
}

Value row_l2_norm(const Value& a) {
    Tensor out = a.data().rowwise().norm();
    return Value::make(std::move(out), "row_l2_norm", {a}, [](detail::Node& n) {
        auto& p = parent(n, 0);
        for (Eigen::Index r = 0; r < p.data.rows(); ++r) {
            const double norm = n.data(r, 0);
            if (norm > 0.0) p.grad.row(r) += p.data.row(r) * (n.grad(r, 0) / norm);
        }
    });
}

Value l2_norm(const Value& a) {
    Tensor out(1, 1);
    out(0, 0) = a.data().norm();
    return Value::make(std::move(out), "l2_norm", {a}, [](detail::Node& n) {
        const double norm = n.data(0, 0);
        if (norm > 0.0) parent(n, 0).grad += parent(n, 0).data * (n.grad(0, 0) / norm);
    });
}

}  // namespace agnn::ad
