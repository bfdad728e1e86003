#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace divctl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Tensor storage is 64-byte aligned. Vectorized kernels split a loop by the
// start address, so unaligned buffers would make results vary between runs.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

namespace detail {

struct Node {
    Shape shape;
    Buffer value;
    Buffer grad;  // empty until backward reaches the node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into inputs that require grad.
    std::function<void(Node&)> backward;
};

}  // namespace detail

// Dense row-major f64 array. Copies share storage; the differentiation tape is
// the graph of shared nodes reachable from a result, so it is released as soon
// as the last tensor referencing it goes away.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t ndim() const { return shape().size(); }
    std::size_t dim(std::size_t i) const { return shape().at(i); }
    std::size_t numel() const;
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const;
    // In-place write access, meant for parameters (optimizer, checkpoint load).
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t i) const { return data()[i]; }
    double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    Tensor detach() const;
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// Builds an op result. When no input requires grad the result is a constant
// and the backward closure is dropped.
Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward);

// Reverse-mode pass from a single-element tensor. Gradients accumulate into
// every reachable node that requires grad.
void backward(const Tensor& loss);

}  // namespace divctl
