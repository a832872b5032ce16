#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "xfake/rng.hpp"
#include "xfake/tensor.hpp"

namespace xfake::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the dynamically built computation graph. Nodes are created by
// the op functions below and freed when the last Var referencing the graph
// goes out of scope; parameter leaves live on inside their owning modules.
struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    std::function<void(Node&)> backward;

    void accumulate(const Tensor& g);
};

// Handle to a graph node.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : n_(std::move(n)) {}

    static Var leaf(Tensor value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor& value() const { return n_->value; }
    Tensor& value() { return n_->value; }
    const Tensor& grad() const { return n_->grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }
    void zero_grad() {
        if (n_ && !n_->grad.empty()) n_->grad.fill(0.0);
    }
    double item() const { return n_->value[0]; }
    const std::vector<int>& shape() const { return n_->value.shape(); }
    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

// While an instance is alive, ops build no graph (forward values only).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Runs reverse-mode accumulation from a scalar root.
void backward(const Var& root);

// ---- elementwise / arithmetic ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var neg(const Var& a);
Var square(const Var& a);
// sqrt(max(x, floor)); zero slope below the floor
Var sqrt_floor(const Var& a, double floor);
Var exp_(const Var& a);
Var log_(const Var& a);
Var abs_(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var clamp_min(const Var& a, double m);

// ---- reductions / shape ----
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);  // [N,D] -> [N]
Var reshape(const Var& a, std::vector<int> shape);
Var detach(const Var& a);

// ---- linear algebra / nn primitives ----
Var matmul(const Var& a, const Var& b);                       // [M,K]x[K,N]
Var linear(const Var& x, const Var& w, const Var& b);         // x[N,F] w[O,F] b[O]
Var conv2d(const Var& x, const Var& w, int stride, int pad);  // x[N,C,H,W] w[O,C,kh,kw]
Var add_channel_bias(const Var& x, const Var& b);             // x[N,C,H,W] b[C]
Var upsample2(const Var& x);                                  // nearest-neighbor x2
Var crop2d(const Var& x, int out_h, int out_w);               // top-left anchored
Var global_avg_pool(const Var& x);                            // [N,C,H,W] -> [N,C]
Var softmax_rows(const Var& x);                               // [N,C]
Var log_softmax_rows(const Var& x);
Var dropout(const Var& x, double rate, Rng& rng);

// Constant N(0,1) tensor leaf (no gradient).
Var gaussian_like(const std::vector<int>& shape, Rng& rng);

}  // namespace xfake::ad
