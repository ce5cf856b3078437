#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace agnn::ad {

/// Dense row-major storage for every value on the tape. A scalar is 1x1, a
/// D-vector is 1xD, and a batch of n vectors is nxD.
using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

class ShapeError : public std::invalid_argument {
public:
    ShapeError(const std::string& op, const Tensor& a, const Tensor& b);
    ShapeError(const std::string& op, const std::string& what);
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string shape_string(const Tensor& t);

namespace detail {

struct Node {
    Tensor data;
    Tensor grad;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;
    std::uint64_t seq = 0;
    bool requires_grad = false;
};

}  // namespace detail

/// Handle to a node of the computation record. Copies share the node.
class Value {
public:
    Value();
    explicit Value(Tensor data, bool requires_grad = false);

    static Value scalar(double v, bool requires_grad = false);

    const Tensor& data() const { return node_->data; }
    Tensor& data() { return node_->data; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& grad() { return node_->grad; }

    Eigen::Index rows() const { return node_->data.rows(); }
    Eigen::Index cols() const { return node_->data.cols(); }
    double item() const;
    const char* op() const { return node_->op; }
    bool requires_grad() const { return node_->requires_grad; }
    std::uint64_t seq() const { return node_->seq; }
    std::size_t parent_count() const { return node_->parents.size(); }

    void zero_grad();

    /// Populates grad on every ancestor that requires it. Interior grads are
    /// reset first, leaf grads accumulate across calls. An interior node's
    /// grad is empty until a backward pass reaches it.
    void backward();

    const std::shared_ptr<detail::Node>& node() const { return node_; }

    static Value make(Tensor data, const char* op, std::vector<Value> parents,
                      std::function<void(detail::Node&)> backward_fn);

private:
    explicit Value(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    std::shared_ptr<detail::Node> node_;
};

// Construction
Value constant(Tensor data);
Value zeros(Eigen::Index rows, Eigen::Index cols);

// Linear algebra and elementwise arithmetic
Value matmul(const Value& a, const Value& b);
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value scale(const Value& a, double s);
Value add_scalar(const Value& a, double s);
/// a (n x c) plus a row vector (1 x c) broadcast over rows.
Value add_row(const Value& a, const Value& row);
Value square(const Value& a);
Value exp(const Value& a);

// Activations
Value sigmoid(const Value& a);
Value leaky_relu(const Value& a, double slope);

// Structural
Value concat_cols(const Value& a, const Value& b);
Value concat_rows(const Value& a, const Value& b);
Value gather_rows(const Value& a, std::span<const Eigen::Index> rows);

// Reductions
Value sum(const Value& a);
Value mean_rows(const Value& a);
/// Mean of consecutive row groups; group g spans rows [offsets[g], offsets[g+1]).
/// An empty group yields a zero row.
Value segment_mean(const Value& a, std::span<const Eigen::Index> offsets);
/// Rowwise inner product, n x 1.
Value row_dot(const Value& a, const Value& b);
/// Rowwise Euclidean norm, n x 1. The subgradient at a zero row is taken as 0.
Value row_l2_norm(const Value& a);
/// Frobenius norm of the whole value, 1 x 1.
Value l2_norm(const Value& a);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return mul(a, b); }

}  // namespace agnn::ad
