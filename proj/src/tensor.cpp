#include "divctl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "divctl/errors.hpp"
#include "divctl/ops.hpp"

namespace divctl {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw ContractError("tensor data length " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value.assign(data.begin(), data.end());
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) {
    return from_data({1}, {value});
}

const Shape& Tensor::shape() const {
    require(defined(), "use of undefined tensor");
    return node_->shape;
}

std::size_t Tensor::numel() const {
    return defined() ? node_->value.size() : 0;
}

std::size_t Tensor::rows() const {
    require(ndim() == 2, "rows() on non-matrix " + shape_str(shape()));
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    require(ndim() == 2, "cols() on non-matrix " + shape_str(shape()));
    return node_->shape[1];
}

std::span<const double> Tensor::data() const {
    require(defined(), "use of undefined tensor");
    return node_->value;
}

std::span<double> Tensor::mutable_data() {
    require(defined(), "use of undefined tensor");
    return node_->value;
}

double Tensor::item() const {
    require(numel() == 1, "item() on tensor with shape " + shape_str(shape()));
    return node_->value[0];
}

bool Tensor::requires_grad() const {
    return defined() && node_->requires_grad;
}

bool Tensor::has_grad() const {
    return defined() && !node_->grad.empty();
}

std::span<const double> Tensor::grad() const {
    require(defined(), "use of undefined tensor");
    return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
    require(defined(), "use of undefined tensor");
    if (node_->grad.size() != node_->value.size()) {
        node_->grad.assign(node_->value.size(), 0.0);
    }
    return node_->grad;
}

void Tensor::zero_grad() {
    if (defined() && !node_->grad.empty()) {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }
}

Tensor Tensor::detach() const {
    return from_data(shape(), std::vector<double>(node_->value.begin(), node_->value.end()), false);
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() {
    return g_grad_enabled;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
    g_grad_enabled = previous_;
}

Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward_fn) {
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    const bool any = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) {
            node->inputs.push_back(t.node());
        }
        node->backward = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
    require(loss.defined() && loss.numel() == 1,
            "backward() needs a scalar loss, got shape " +
                (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    if (!loss.requires_grad()) {
        return;
    }

    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (detail::Node* n : order) {
        if (n->grad.size() != n->value.size()) {
            n->grad.assign(n->value.size(), 0.0);
        }
    }
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) {
            (*it)->backward(**it);
        }
    }
}

}  // namespace divctl
