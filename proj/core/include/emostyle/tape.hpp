#pragma once

#include <string>
#include <vector>

#include "emostyle/params.hpp"
#include "emostyle/tensor.hpp"

namespace emostyle {

using NodeId = int;

// Reverse-mode tape over Tensor<S>. Ops evaluate eagerly on creation, so
// intermediate values (e.g. a style query that must be quantized mid-graph)
// can be read back before the loss is finished. backward() walks the tape
// once and accumulates parameter gradients by name.
//
// Broadcasting is limited to bias-add and the channel ops; everything else
// wants exact shapes and throws ShapeError otherwise.
template <class S>
class Tape {
  public:
    // Leaves. Constants never receive gradients; params do, keyed by name.
    NodeId constant(Tensor<S> v);
    NodeId param(const std::string& name, const Tensor<S>& value);
    NodeId param(const ParamSet<S>& ps, const std::string& name) { return param(name, ps.param(name)); }

    // a{m,k} x b{k,n} -> {m,n}
    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId scale(NodeId a, double c);
    // x{...,n} + b{n}, broadcast over leading dims
    NodeId add_bias(NodeId x, NodeId b);
    NodeId gelu(NodeId x);
    // normalize over the last dim; gain/bias{n}
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);
    // fused multi-head self-attention over x{T,D}; weights {D,D}, biases {D}
    NodeId attention(NodeId x, NodeId wq, NodeId bq, NodeId wk, NodeId bk, NodeId wv, NodeId bv,
                     NodeId wo, NodeId bo, int heads);
    // x{C,H,W} * w{Co,C,3,3} + b{Co}, stride 1, zero padding -> {Co,H,W}
    NodeId conv3x3(NodeId x, NodeId w, NodeId b);
    // x{C,H,W} modulated per channel: x*(1+gamma[c]) + beta[c]
    NodeId film(NodeId x, NodeId gamma, NodeId beta);
    // x{T,D} -> {D}
    NodeId mean_rows(NodeId x);
    // x{C,H,W} -> {C,H/2,W/2}, 2x2 mean
    NodeId avg_pool2(NodeId x);
    // scalars
    NodeId mse(NodeId a, NodeId b);
    NodeId sum_sq_diff(NodeId a, NodeId b);
    // logits{B,C}, one target class per row -> mean cross entropy
    NodeId softmax_cross_entropy(NodeId logits, std::vector<int> targets);
    // joins and views
    NodeId concat_rows(NodeId a, NodeId b);
    NodeId concat_vec(NodeId a, NodeId b);
    NodeId row(NodeId x, std::size_t i);
    NodeId reshape(NodeId x, Shape s);
    // v{C} -> {C,H,W}, value repeated over pixels
    NodeId broadcast_channels(NodeId v, std::size_t h, std::size_t w);
    NodeId concat_channels(NodeId a, NodeId b);

    const Tensor<S>& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    double scalar(NodeId id) const;

    // Reverse pass from a scalar node. Parameter gradients are added into
    // `grads` (created as zeros on first touch), so per-sample gradients can
    // be reduced in a fixed order by the caller.
    void backward(NodeId loss, Grads<S>& grads);

    // Gradient w.r.t. an arbitrary node from the last backward() call.
    // Empty tensor if the node was never reached.
    const Tensor<S>& node_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    std::size_t size() const { return nodes_.size(); }

  private:
    enum class Op {
        kConst,
        kParam,
        kMatMul,
        kAdd,
        kSub,
        kScale,
        kAddBias,
        kGelu,
        kLayerNorm,
        kAttention,
        kConv3x3,
        kFilm,
        kMeanRows,
        kAvgPool2,
        kMse,
        kSsd,
        kSoftmaxCe,
        kConcatRows,
        kConcatVec,
        kRow,
        kReshape,
        kBroadcastChannels,
        kConcatChannels,
    };

    struct Node {
        Op op;
        Tensor<S> value;
        Tensor<S> grad;  // allocated lazily during backward
        std::vector<NodeId> in;
        std::vector<Tensor<S>> saved;
        std::vector<double> attrs;
        std::vector<int> iattrs;
        std::string pname;
        bool needs_grad = false;
    };

    NodeId push(Node n);
    Node& at(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& at(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    Tensor<S>& grad_buf(NodeId id);
    bool any_needs_grad(std::initializer_list<NodeId> ids) const;
    void backward_node(NodeId id, Grads<S>& grads);

    std::vector<Node> nodes_;
};

// y = x{m,k} * w{k,n} + b{n}
template <class S>
NodeId affine(Tape<S>& t, NodeId x, NodeId w, NodeId b) {
    return t.add_bias(t.matmul(x, w), b);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace emostyle
