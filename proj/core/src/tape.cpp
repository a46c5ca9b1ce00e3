#include "emostyle/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

#include "emostyle/errors.hpp"
#include "kernels.hpp"

namespace emostyle {

namespace {

template <class S>
void add_into(Tensor<S>& dst, const Tensor<S>& src, const Shape& shape) {
    if (dst.data.empty()) dst = Tensor<S>::zeros(shape);
    for (std::size_t i = 0; i < src.numel(); ++i) dst.data[i] += src.data[i];
}

using detail::gelu_bwd;
using detail::gelu_fwd;

template <class S>
void colsum_acc(const Tensor<S>& g, std::size_t rows, std::size_t cols, Tensor<S>& out) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) out.data[j] += g.data[r * cols + j];
}

}  // namespace

template <class S>
NodeId Tape<S>::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

template <class S>
Tensor<S>& Tape<S>::grad_buf(NodeId id) {
    Node& n = at(id);
    if (n.grad.data.empty()) n.grad = Tensor<S>::zeros(n.value.shape);
    return n.grad;
}

template <class S>
bool Tape<S>::any_needs_grad(std::initializer_list<NodeId> ids) const {
    for (NodeId id : ids)
        if (at(id).needs_grad) return true;
    return false;
}

template <class S>
double Tape<S>::scalar(NodeId id) const {
    const Tensor<S>& v = value(id);
    if (v.numel() != 1) throw ShapeError("scalar: node has shape " + shape_str(v.shape));
    return static_cast<double>(v.data[0]);
}

template <class S>
NodeId Tape<S>::constant(Tensor<S> v) {
    Node n;
    n.op = Op::kConst;
    n.value = std::move(v);
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::param(const std::string& name, const Tensor<S>& value) {
    if (name.empty()) throw ValidationError("param: empty name");
    Node n;
    n.op = Op::kParam;
    n.value = value;
    n.pname = name;
    n.needs_grad = true;
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::matmul(NodeId a, NodeId b) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& bv = value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
        throw ShapeError("matmul: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    const std::size_t m = av.shape[0], k = av.shape[1], nn = bv.shape[1];
    Node n;
    n.op = Op::kMatMul;
    n.in = {a, b};
    n.needs_grad = any_needs_grad({a, b});
    n.value = Tensor<S>::zeros({m, nn});
    detail::gemm_nn_acc(av.data.data(), bv.data.data(), n.value.data.data(), m, k, nn);
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::add(NodeId a, NodeId b) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& bv = value(b);
    if (!av.same_shape(bv)) throw ShapeError("add: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Node n;
    n.op = Op::kAdd;
    n.in = {a, b};
    n.needs_grad = any_needs_grad({a, b});
    n.value = av;
    for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] += bv.data[i];
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::sub(NodeId a, NodeId b) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& bv = value(b);
    if (!av.same_shape(bv)) throw ShapeError("sub: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Node n;
    n.op = Op::kSub;
    n.in = {a, b};
    n.needs_grad = any_needs_grad({a, b});
    n.value = av;
    for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] -= bv.data[i];
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::scale(NodeId a, double c) {
    const Tensor<S>& av = value(a);
    Node n;
    n.op = Op::kScale;
    n.in = {a};
    n.needs_grad = at(a).needs_grad;
    n.attrs = {c};
    n.value = av;
    const S cs = static_cast<S>(c);
    for (S& v : n.value.data) v *= cs;
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::add_bias(NodeId x, NodeId b) {
    const Tensor<S>& xv = value(x);
    const Tensor<S>& bv = value(b);
    if (bv.rank() != 1 || xv.rank() < 1 || xv.shape.back() != bv.shape[0])
        throw ShapeError("add_bias: " + shape_str(xv.shape) + " + " + shape_str(bv.shape));
    Node n;
    n.op = Op::kAddBias;
    n.in = {x, b};
    n.needs_grad = any_needs_grad({x, b});
    n.value = xv;
    const std::size_t cols = bv.shape[0];
    const std::size_t rows = xv.numel() / cols;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) n.value.data[r * cols + j] += bv.data[j];
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::gelu(NodeId x) {
    Node n;
    n.op = Op::kGelu;
    n.in = {x};
    n.needs_grad = at(x).needs_grad;
    n.value = value(x);
    for (S& v : n.value.data) v = gelu_fwd(v);
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::layer_norm(NodeId x, NodeId gain, NodeId bias) {
    const Tensor<S>& xv = value(x);
    const Tensor<S>& gv = value(gain);
    const Tensor<S>& bv = value(bias);
    if (xv.rank() < 1 || gv.rank() != 1 || bv.rank() != 1 || gv.shape[0] != xv.shape.back() ||
        bv.shape[0] != xv.shape.back())
        throw ShapeError("layer_norm: x " + shape_str(xv.shape) + ", gain " + shape_str(gv.shape) + ", bias " +
                         shape_str(bv.shape));
    const std::size_t d = xv.shape.back();
    const std::size_t rows = xv.numel() / d;
    const S eps = S(1e-5);
    Node n;
    n.op = Op::kLayerNorm;
    n.in = {x, gain, bias};
    n.needs_grad = any_needs_grad({x, gain, bias});
    n.value = Tensor<S>::zeros(xv.shape);
    Tensor<S> xhat = Tensor<S>::zeros(xv.shape);
    Tensor<S> inv_std = Tensor<S>::zeros({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xr = xv.data.data() + r * d;
        // shifted mean: exact for constant rows, so zero variance centers to zero
        S acc = S(0);
        for (std::size_t j = 0; j < d; ++j) acc += xr[j] - xr[0];
        const S mu = xr[0] + acc / static_cast<S>(d);
        S var = S(0);
        for (std::size_t j = 0; j < d; ++j) {
            const S c = xr[j] - mu;
            var += c * c;
        }
        var /= static_cast<S>(d);
        const S is = S(1) / std::sqrt(var + eps);
        inv_std.data[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const S xh = (xr[j] - mu) * is;
            xhat.data[r * d + j] = xh;
            n.value.data[r * d + j] = gv.data[j] * xh + bv.data[j];
        }
    }
    n.saved.push_back(std::move(xhat));
    n.saved.push_back(std::move(inv_std));
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::attention(NodeId x, NodeId wq, NodeId bq, NodeId wk, NodeId bk, NodeId wv, NodeId bv, NodeId wo,
                          NodeId bo, int heads) {
    const Tensor<S>& xv = value(x);
    if (xv.rank() != 2) throw ShapeError("attention: x " + shape_str(xv.shape));
    const std::size_t t = xv.shape[0], d = xv.shape[1];
    for (NodeId w : {wq, wk, wv, wo}) {
        const Tensor<S>& wvv = value(w);
        if (wvv.rank() != 2 || wvv.shape[0] != d || wvv.shape[1] != d)
            throw ShapeError("attention: weight " + shape_str(wvv.shape) + " for width " + std::to_string(d));
    }
    for (NodeId b : {bq, bk, bv, bo}) {
        const Tensor<S>& bvv = value(b);
        if (bvv.rank() != 1 || bvv.shape[0] != d)
            throw ShapeError("attention: bias " + shape_str(bvv.shape) + " for width " + std::to_string(d));
    }
    if (heads < 1 || d % static_cast<std::size_t>(heads) != 0)
        throw ValidationError("attention: width " + std::to_string(d) + " not divisible by " +
                              std::to_string(heads) + " heads");
    const std::size_t h = static_cast<std::size_t>(heads);
    const std::size_t dh = d / h;
    const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));

    auto project = [&](NodeId w, NodeId b) {
        Tensor<S> out = Tensor<S>::zeros({t, d});
        detail::gemm_nn_acc(xv.data.data(), value(w).data.data(), out.data.data(), t, d, d);
        const Tensor<S>& bvv = value(b);
        for (std::size_t r = 0; r < t; ++r)
            for (std::size_t j = 0; j < d; ++j) out.data[r * d + j] += bvv.data[j];
        return out;
    };
    Tensor<S> q = project(wq, bq);
    Tensor<S> k = project(wk, bk);
    Tensor<S> v = project(wv, bv);

    Tensor<S> probs = Tensor<S>::zeros({h, t, t});
    Tensor<S> o = Tensor<S>::zeros({t, d});
    std::vector<S> srow(t);
    for (std::size_t hh = 0; hh < h; ++hh) {
        const std::size_t off = hh * dh;
        for (std::size_t i = 0; i < t; ++i) {
            for (std::size_t j = 0; j < t; ++j) {
                S s = S(0);
                for (std::size_t e = 0; e < dh; ++e) s += q.data[i * d + off + e] * k.data[j * d + off + e];
                srow[j] = s * inv_sqrt_dh;
            }
            detail::softmax_row(srow.data(), t);
            S* prow = probs.data.data() + (hh * t + i) * t;
            for (std::size_t j = 0; j < t; ++j) {
                prow[j] = srow[j];
                for (std::size_t e = 0; e < dh; ++e) o.data[i * d + off + e] += srow[j] * v.data[j * d + off + e];
            }
        }
    }

    Node n;
    n.op = Op::kAttention;
    n.in = {x, wq, bq, wk, bk, wv, bv, wo, bo};
    n.needs_grad = any_needs_grad({x, wq, bq, wk, bk, wv, bv, wo, bo});
    n.iattrs = {heads};
    n.value = Tensor<S>::zeros({t, d});
    detail::gemm_nn_acc(o.data.data(), value(wo).data.data(), n.value.data.data(), t, d, d);
    const Tensor<S>& bov = value(bo);
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t j = 0; j < d; ++j) n.value.data[r * d + j] += bov.data[j];
    n.saved = {std::move(q), std::move(k), std::move(v), std::move(o), std::move(probs)};
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::conv3x3(NodeId x, NodeId w, NodeId b) {
    const Tensor<S>& xv = value(x);
    const Tensor<S>& wv = value(w);
    const Tensor<S>& bv = value(b);
    if (xv.rank() != 3 || wv.rank() != 4 || wv.shape[1] != xv.shape[0] || wv.shape[2] != 3 || wv.shape[3] != 3 ||
        bv.rank() != 1 || bv.shape[0] != wv.shape[0])
        throw ShapeError("conv3x3: x " + shape_str(xv.shape) + ", w " + shape_str(wv.shape) + ", b " +
                         shape_str(bv.shape));
    const std::size_t c = xv.shape[0], hh = xv.shape[1], ww = xv.shape[2], co = wv.shape[0];
    const std::size_t hw = hh * ww, ck = c * 9;
    Tensor<S> col = Tensor<S>::zeros({ck, hw});
    detail::im2col3x3(xv.data.data(), col.data.data(), c, hh, ww);
    Node n;
    n.op = Op::kConv3x3;
    n.in = {x, w, b};
    n.needs_grad = any_needs_grad({x, w, b});
    n.value = Tensor<S>::zeros({co, hh, ww});
    detail::gemm_nn_acc(wv.data.data(), col.data.data(), n.value.data.data(), co, ck, hw);
    for (std::size_t oc = 0; oc < co; ++oc) {
        const S bb = bv.data[oc];
        S* plane = n.value.data.data() + oc * hw;
        for (std::size_t i = 0; i < hw; ++i) plane[i] += bb;
    }
    n.saved.push_back(std::move(col));
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::film(NodeId x, NodeId gamma, NodeId beta) {
    const Tensor<S>& xv = value(x);
    const Tensor<S>& gv = value(gamma);
    const Tensor<S>& bv = value(beta);
    if (xv.rank() != 3 || gv.rank() != 1 || bv.rank() != 1 || gv.shape[0] != xv.shape[0] ||
        bv.shape[0] != xv.shape[0])
        throw ShapeError("film: x " + shape_str(xv.shape) + ", gamma " + shape_str(gv.shape) + ", beta " +
                         shape_str(bv.shape));
    const std::size_t c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
    Node n;
    n.op = Op::kFilm;
    n.in = {x, gamma, beta};
    n.needs_grad = any_needs_grad({x, gamma, beta});
    n.value = xv;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const S g = S(1) + gv.data[ch];
        const S bb = bv.data[ch];
        S* plane = n.value.data.data() + ch * hw;
        for (std::size_t i = 0; i < hw; ++i) plane[i] = plane[i] * g + bb;
    }
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::mean_rows(NodeId x) {
    const Tensor<S>& xv = value(x);
    if (xv.rank() != 2) throw ShapeError("mean_rows: " + shape_str(xv.shape));
    const std::size_t t = xv.shape[0], d = xv.shape[1];
    Node n;
    n.op = Op::kMeanRows;
    n.in = {x};
    n.needs_grad = at(x).needs_grad;
    n.value = Tensor<S>::zeros({d});
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t j = 0; j < d; ++j) n.value.data[j] += xv.data[r * d + j];
    const S inv = S(1) / static_cast<S>(t);
    for (S& v : n.value.data) v *= inv;
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::avg_pool2(NodeId x) {
    const Tensor<S>& xv = value(x);
    if (xv.rank() != 3 || xv.shape[1] % 2 != 0 || xv.shape[2] % 2 != 0)
        throw ShapeError("avg_pool2: " + shape_str(xv.shape));
    const std::size_t c = xv.shape[0], hh = xv.shape[1], ww = xv.shape[2];
    const std::size_t oh = hh / 2, ow = ww / 2;
    Node n;
    n.op = Op::kAvgPool2;
    n.in = {x};
    n.needs_grad = at(x).needs_grad;
    n.value = Tensor<S>::zeros({c, oh, ow});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
                const std::size_t base = ch * hh * ww + 2 * y * ww + 2 * xx;
                n.value.data[ch * oh * ow + y * ow + xx] =
                    (xv.data[base] + xv.data[base + 1] + xv.data[base + ww] + xv.data[base + ww + 1]) * S(0.25);
            }
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::mse(NodeId a, NodeId b) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& bv = value(b);
    if (!av.same_shape(bv)) throw ShapeError("mse: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Node n;
    n.op = Op::kMse;
    n.in = {a, b};
    n.needs_grad = any_needs_grad({a, b});
    S acc = S(0);
    for (std::size_t i = 0; i < av.numel(); ++i) {
        const S diff = av.data[i] - bv.data[i];
        acc += diff * diff;
    }
    n.value = Tensor<S>({1}, {acc / static_cast<S>(av.numel())});
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::sum_sq_diff(NodeId a, NodeId b) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& bv = value(b);
    if (!av.same_shape(bv))
        throw ShapeError("sum_sq_diff: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Node n;
    n.op = Op::kSsd;
    n.in = {a, b};
    n.needs_grad = any_needs_grad({a, b});
    S acc = S(0);
    for (std::size_t i = 0; i < av.numel(); ++i) {
        const S diff = av.data[i] - bv.data[i];
        acc += diff * diff;
    }
    n.value = Tensor<S>({1}, {acc});
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::softmax_cross_entropy(NodeId logits, std::vector<int> targets) {
    const Tensor<S>& lv = value(logits);
    if (lv.rank() != 2) throw ShapeError("softmax_cross_entropy: logits " + shape_str(lv.shape));
    const std::size_t bsz = lv.shape[0], nc = lv.shape[1];
    if (targets.size() != bsz)
        throw ValidationError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                              std::to_string(bsz) + " rows");
    for (int tgt : targets)
        if (tgt < 0 || static_cast<std::size_t>(tgt) >= nc)
            throw ValidationError("softmax_cross_entropy: target " + std::to_string(tgt) + " out of range");
    Node n;
    n.op = Op::kSoftmaxCe;
    n.in = {logits};
    n.needs_grad = at(logits).needs_grad;
    Tensor<S> probs = lv;
    S loss = S(0);
    for (std::size_t r = 0; r < bsz; ++r) {
        S* prow = probs.data.data() + r * nc;
        detail::softmax_row(prow, nc);
        loss -= std::log(prow[static_cast<std::size_t>(targets[r])] + S(1e-12));
    }
    n.value = Tensor<S>({1}, {loss / static_cast<S>(bsz)});
    n.iattrs.assign(targets.begin(), targets.end());
    n.saved.push_back(std::move(probs));
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::concat_rows(NodeId a, NodeId b) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& bv = value(b);
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[1])
        throw ShapeError("concat_rows: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Node n;
    n.op = Op::kConcatRows;
    n.in = {a, b};
    n.needs_grad = any_needs_grad({a, b});
    n.value = Tensor<S>::zeros({av.shape[0] + bv.shape[0], av.shape[1]});
    std::copy(av.data.begin(), av.data.end(), n.value.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), n.value.data.begin() + static_cast<long>(av.numel()));
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::concat_vec(NodeId a, NodeId b) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& bv = value(b);
    if (av.rank() != 1 || bv.rank() != 1)
        throw ShapeError("concat_vec: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Node n;
    n.op = Op::kConcatVec;
    n.in = {a, b};
    n.needs_grad = any_needs_grad({a, b});
    n.value = Tensor<S>::zeros({av.numel() + bv.numel()});
    std::copy(av.data.begin(), av.data.end(), n.value.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), n.value.data.begin() + static_cast<long>(av.numel()));
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::row(NodeId x, std::size_t i) {
    const Tensor<S>& xv = value(x);
    if (xv.rank() != 2 || i >= xv.shape[0])
        throw ShapeError("row: index " + std::to_string(i) + " in " + shape_str(xv.shape));
    const std::size_t d = xv.shape[1];
    Node n;
    n.op = Op::kRow;
    n.in = {x};
    n.needs_grad = at(x).needs_grad;
    n.iattrs = {static_cast<int>(i)};
    n.value = Tensor<S>::zeros({d});
    std::copy(xv.data.begin() + static_cast<long>(i * d), xv.data.begin() + static_cast<long>((i + 1) * d),
              n.value.data.begin());
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::reshape(NodeId x, Shape s) {
    const Tensor<S>& xv = value(x);
    if (shape_numel(s) != xv.numel())
        throw ShapeError("reshape: " + shape_str(xv.shape) + " -> " + shape_str(s));
    Node n;
    n.op = Op::kReshape;
    n.in = {x};
    n.needs_grad = at(x).needs_grad;
    n.value = Tensor<S>(std::move(s), xv.data);
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::broadcast_channels(NodeId v, std::size_t h, std::size_t w) {
    const Tensor<S>& vv = value(v);
    if (vv.rank() != 1 || h == 0 || w == 0) throw ShapeError("broadcast_channels: " + shape_str(vv.shape));
    const std::size_t c = vv.shape[0];
    Node n;
    n.op = Op::kBroadcastChannels;
    n.in = {v};
    n.needs_grad = at(v).needs_grad;
    n.value = Tensor<S>::zeros({c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        S* plane = n.value.data.data() + ch * h * w;
        for (std::size_t i = 0; i < h * w; ++i) plane[i] = vv.data[ch];
    }
    return push(std::move(n));
}

template <class S>
NodeId Tape<S>::concat_channels(NodeId a, NodeId b) {
    const Tensor<S>& av = value(a);
    const Tensor<S>& bv = value(b);
    if (av.rank() != 3 || bv.rank() != 3 || av.shape[1] != bv.shape[1] || av.shape[2] != bv.shape[2])
        throw ShapeError("concat_channels: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Node n;
    n.op = Op::kConcatChannels;
    n.in = {a, b};
    n.needs_grad = any_needs_grad({a, b});
    n.value = Tensor<S>::zeros({av.shape[0] + bv.shape[0], av.shape[1], av.shape[2]});
    std::copy(av.data.begin(), av.data.end(), n.value.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), n.value.data.begin() + static_cast<long>(av.numel()));
    return push(std::move(n));
}

template <class S>
void Tape<S>::backward(NodeId loss, Grads<S>& grads) {
    const Tensor<S>& lv = value(loss);
    if (lv.numel() != 1) throw ShapeError("backward: loss has shape " + shape_str(lv.shape));
    for (Node& n : nodes_) n.grad = Tensor<S>();
    at(loss).grad = Tensor<S>({1}, {S(1)});
    for (NodeId id = loss; id >= 0; --id) {
        Node& n = at(id);
        if (!n.needs_grad || n.grad.data.empty()) continue;
        backward_node(id, grads);
    }
}

template <class S>
void Tape<S>::backward_node(NodeId id, Grads<S>& grads) {
    Node& n = at(id);
    const Tensor<S>& g = n.grad;
    auto in_needs = [&](std::size_t i) { return at(n.in[i]).needs_grad; };
    auto in_val = [&](std::size_t i) -> const Tensor<S>& { return value(n.in[i]); };
    auto in_grad = [&](std::size_t i) -> Tensor<S>& { return grad_buf(n.in[i]); };

    switch (n.op) {
        case Op::kConst:
            break;
        case Op::kParam: {
            auto it = grads.find(n.pname);
            if (it == grads.end()) it = grads.emplace(n.pname, Tensor<S>::zeros(n.value.shape)).first;
            else if (!it->second.same_shape(g))
                throw ShapeError("grad shape clash for " + n.pname);
            for (std::size_t i = 0; i < g.numel(); ++i) it->second.data[i] += g.data[i];
            break;
        }
        case Op::kMatMul: {
            const Tensor<S>& a = in_val(0);
            const Tensor<S>& b = in_val(1);
            const std::size_t m = a.shape[0], k = a.shape[1], nn = b.shape[1];
            if (in_needs(0)) {
                Tensor<S> bt = Tensor<S>::zeros({nn, k});
                detail::transpose(b.data.data(), bt.data.data(), k, nn);
                detail::gemm_nn_acc(g.data.data(), bt.data.data(), in_grad(0).data.data(), m, nn, k);
            }
            if (in_needs(1)) {
                Tensor<S> atr = Tensor<S>::zeros({k, m});
                detail::transpose(a.data.data(), atr.data.data(), m, k);
                detail::gemm_nn_acc(atr.data.data(), g.data.data(), in_grad(1).data.data(), k, m, nn);
            }
            break;
        }
        case Op::kAdd:
            if (in_needs(0)) add_into(at(n.in[0]).grad, g, in_val(0).shape);
            if (in_needs(1)) add_into(at(n.in[1]).grad, g, in_val(1).shape);
            break;
        case Op::kSub: {
            if (in_needs(0)) add_into(at(n.in[0]).grad, g, in_val(0).shape);
            if (in_needs(1)) {
                Tensor<S>& db = in_grad(1);
                for (std::size_t i = 0; i < g.numel(); ++i) db.data[i] -= g.data[i];
            }
            break;
        }
        case Op::kScale: {
            if (in_needs(0)) {
                const S c = static_cast<S>(n.attrs[0]);
                Tensor<S>& da = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i) da.data[i] += c * g.data[i];
            }
            break;
        }
        case Op::kAddBias: {
            if (in_needs(0)) add_into(at(n.in[0]).grad, g, in_val(0).shape);
            if (in_needs(1)) {
                const std::size_t cols = in_val(1).shape[0];
                colsum_acc(g, g.numel() / cols, cols, in_grad(1));
            }
            break;
        }
        case Op::kGelu: {
            if (in_needs(0)) {
                const Tensor<S>& x = in_val(0);
                Tensor<S>& dx = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i) dx.data[i] += g.data[i] * gelu_bwd(x.data[i]);
            }
            break;
        }
        case Op::kLayerNorm: {
            const Tensor<S>& xhat = n.saved[0];
            const Tensor<S>& inv_std = n.saved[1];
            const Tensor<S>& gv = in_val(1);
            const std::size_t d = in_val(0).shape.back();
            const std::size_t rows = in_val(0).numel() / d;
            for (std::size_t r = 0; r < rows; ++r) {
                const S* gr = g.data.data() + r * d;
                const S* xh = xhat.data.data() + r * d;
                if (in_needs(0)) {
                    S m1 = S(0), m2 = S(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const S dxh = gr[j] * gv.data[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= static_cast<S>(d);
                    m2 /= static_cast<S>(d);
                    Tensor<S>& dx = in_grad(0);
                    const S is = inv_std.data[r];
                    for (std::size_t j = 0; j < d; ++j)
                        dx.data[r * d + j] += is * (gr[j] * gv.data[j] - m1 - xh[j] * m2);
                }
                if (in_needs(1)) {
                    Tensor<S>& dg = in_grad(1);
                    for (std::size_t j = 0; j < d; ++j) dg.data[j] += gr[j] * xh[j];
                }
                if (in_needs(2)) {
                    Tensor<S>& db = in_grad(2);
                    for (std::size_t j = 0; j < d; ++j) db.data[j] += gr[j];
                }
            }
            break;
        }
        case Op::kAttention: {
            const Tensor<S>& x = in_val(0);
            const std::size_t t = x.shape[0], d = x.shape[1];
            const std::size_t h = static_cast<std::size_t>(n.iattrs[0]);
            const std::size_t dh = d / h;
            const S inv_sqrt_dh = S(1) / std::sqrt(static_cast<S>(dh));
            const Tensor<S>& q = n.saved[0];
            const Tensor<S>& k = n.saved[1];
            const Tensor<S>& v = n.saved[2];
            const Tensor<S>& o = n.saved[3];
            const Tensor<S>& probs = n.saved[4];

            // out projection
            if (in_needs(8)) colsum_acc(g, t, d, in_grad(8));
            if (in_needs(7)) {
                Tensor<S> ot = Tensor<S>::zeros({d, t});
                detail::transpose(o.data.data(), ot.data.data(), t, d);
                detail::gemm_nn_acc(ot.data.data(), g.data.data(), in_grad(7).data.data(), d, t, d);
            }
            Tensor<S> dO = Tensor<S>::zeros({t, d});
            {
                const Tensor<S>& wo = in_val(7);
                Tensor<S> wot = Tensor<S>::zeros({d, d});
                detail::transpose(wo.data.data(), wot.data.data(), d, d);
                detail::gemm_nn_acc(g.data.data(), wot.data.data(), dO.data.data(), t, d, d);
            }

            Tensor<S> dQ = Tensor<S>::zeros({t, d});
            Tensor<S> dK = Tensor<S>::zeros({t, d});
            Tensor<S> dV = Tensor<S>::zeros({t, d});
            std::vector<S> dp(t), ds(t);
            for (std::size_t hh = 0; hh < h; ++hh) {
                const std::size_t off = hh * dh;
                for (std::size_t i = 0; i < t; ++i) {
                    const S* prow = probs.data.data() + (hh * t + i) * t;
                    S dot = S(0);
                    for (std::size_t j = 0; j < t; ++j) {
                        S s = S(0);
                        for (std::size_t e = 0; e < dh; ++e) s += dO.data[i * d + off + e] * v.data[j * d + off + e];
                        dp[j] = s;
                        dot += s * prow[j];
                    }
                    for (std::size_t j = 0; j < t; ++j) {
                        ds[j] = prow[j] * (dp[j] - dot) * inv_sqrt_dh;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dV.data[j * d + off + e] += prow[j] * dO.data[i * d + off + e];
                            dQ.data[i * d + off + e] += ds[j] * k.data[j * d + off + e];
                            dK.data[j * d + off + e] += ds[j] * q.data[i * d + off + e];
                        }
                    }
                }
            }

            Tensor<S> xt = Tensor<S>::zeros({d, t});
            detail::transpose(x.data.data(), xt.data.data(), t, d);
            auto back_proj = [&](const Tensor<S>& dproj, std::size_t wi, std::size_t bi) {
                if (in_needs(bi)) colsum_acc(dproj, t, d, in_grad(bi));
                if (in_needs(wi))
                    detail::gemm_nn_acc(xt.data.data(), dproj.data.data(), in_grad(wi).data.data(), d, t, d);
                if (in_needs(0)) {
                    const Tensor<S>& w = in_val(wi);
                    Tensor<S> wt = Tensor<S>::zeros({d, d});
                    detail::transpose(w.data.data(), wt.data.data(), d, d);
                    detail::gemm_nn_acc(dproj.data.data(), wt.data.data(), in_grad(0).data.data(), t, d, d);
                }
            };
            back_proj(dQ, 1, 2);
            back_proj(dK, 3, 4);
            back_proj(dV, 5, 6);
            break;
        }
        case Op::kConv3x3: {
            const Tensor<S>& x = in_val(0);
            const Tensor<S>& w = in_val(1);
            const std::size_t c = x.shape[0], hh = x.shape[1], ww = x.shape[2];
            const std::size_t co = w.shape[0], hw = hh * ww, ck = c * 9;
            const Tensor<S>& col = n.saved[0];
            if (in_needs(2)) {
                Tensor<S>& db = in_grad(2);
                for (std::size_t oc = 0; oc < co; ++oc) {
                    S acc = S(0);
                    const S* plane = g.data.data() + oc * hw;
                    for (std::size_t i = 0; i < hw; ++i) acc += plane[i];
                    db.data[oc] += acc;
                }
            }
            if (in_needs(1)) {
                Tensor<S> colt = Tensor<S>::zeros({hw, ck});
                detail::transpose(col.data.data(), colt.data.data(), ck, hw);
                detail::gemm_nn_acc(g.data.data(), colt.data.data(), in_grad(1).data.data(), co, hw, ck);
            }
            if (in_needs(0)) {
                Tensor<S> wt = Tensor<S>::zeros({ck, co});
                detail::transpose(w.data.data(), wt.data.data(), co, ck);
                Tensor<S> dcol = Tensor<S>::zeros({ck, hw});
                detail::gemm_nn_acc(wt.data.data(), g.data.data(), dcol.data.data(), ck, co, hw);
                detail::col2im3x3_acc(dcol.data.data(), in_grad(0).data.data(), c, hh, ww);
            }
            break;
        }
        case Op::kFilm: {
            const Tensor<S>& x = in_val(0);
            const Tensor<S>& gv = in_val(1);
            const std::size_t c = x.shape[0], hw = x.shape[1] * x.shape[2];
            for (std::size_t ch = 0; ch < c; ++ch) {
                const S* gp = g.data.data() + ch * hw;
                const S* xp = x.data.data() + ch * hw;
                if (in_needs(0)) {
                    const S gm = S(1) + gv.data[ch];
                    S* dx = in_grad(0).data.data() + ch * hw;
                    for (std::size_t i = 0; i < hw; ++i) dx[i] += gp[i] * gm;
                }
                if (in_needs(1)) {
                    S acc = S(0);
                    for (std::size_t i = 0; i < hw; ++i) acc += gp[i] * xp[i];
                    in_grad(1).data[ch] += acc;
                }
                if (in_needs(2)) {
                    S acc = S(0);
                    for (std::size_t i = 0; i < hw; ++i) acc += gp[i];
                    in_grad(2).data[ch] += acc;
                }
            }
            break;
        }
        case Op::kMeanRows: {
            if (in_needs(0)) {
                const std::size_t t = in_val(0).shape[0], d = in_val(0).shape[1];
                const S inv = S(1) / static_cast<S>(t);
                Tensor<S>& dx = in_grad(0);
                for (std::size_t r = 0; r < t; ++r)
                    for (std::size_t j = 0; j < d; ++j) dx.data[r * d + j] += g.data[j] * inv;
            }
            break;
        }
        case Op::kAvgPool2: {
            if (in_needs(0)) {
                const std::size_t c = in_val(0).shape[0], hh = in_val(0).shape[1], ww = in_val(0).shape[2];
                const std::size_t oh = hh / 2, ow = ww / 2;
                Tensor<S>& dx = in_grad(0);
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t y = 0; y < oh; ++y)
                        for (std::size_t xx = 0; xx < ow; ++xx) {
                            const S gq = g.data[ch * oh * ow + y * ow + xx] * S(0.25);
                            const std::size_t base = ch * hh * ww + 2 * y * ww + 2 * xx;
                            dx.data[base] += gq;
                            dx.data[base + 1] += gq;
                            dx.data[base + ww] += gq;
                            dx.data[base + ww + 1] += gq;
                        }
            }
            break;
        }
        case Op::kMse:
        case Op::kSsd: {
            const Tensor<S>& a = in_val(0);
            const Tensor<S>& b = in_val(1);
            const S g0 = g.data[0];
            const S coef =
                n.op == Op::kMse ? S(2) * g0 / static_cast<S>(a.numel()) : S(2) * g0;
            if (in_needs(0)) {
                Tensor<S>& da = in_grad(0);
                for (std::size_t i = 0; i < a.numel(); ++i) da.data[i] += coef * (a.data[i] - b.data[i]);
            }
            if (in_needs(1)) {
                Tensor<S>& db = in_grad(1);
                for (std::size_t i = 0; i < a.numel(); ++i) db.data[i] -= coef * (a.data[i] - b.data[i]);
            }
            break;
        }
        case Op::kSoftmaxCe: {
            if (in_needs(0)) {
                const Tensor<S>& probs = n.saved[0];
                const std::size_t bsz = probs.shape[0], nc = probs.shape[1];
                const S coef = g.data[0] / static_cast<S>(bsz);
                Tensor<S>& dl = in_grad(0);
                for (std::size_t r = 0; r < bsz; ++r) {
                    const std::size_t tgt = static_cast<std::size_t>(n.iattrs[r]);
                    for (std::size_t cc = 0; cc < nc; ++cc) {
                        S p = probs.data[r * nc + cc];
                        if (cc == tgt) p -= S(1);
                        dl.data[r * nc + cc] += coef * p;
                    }
                }
            }
            break;
        }
        case Op::kConcatRows:
        case Op::kConcatVec:
        case Op::kConcatChannels: {
            const std::size_t na = in_val(0).numel();
            if (in_needs(0)) {
                Tensor<S>& da = in_grad(0);
                for (std::size_t i = 0; i < na; ++i) da.data[i] += g.data[i];
            }
            if (in_needs(1)) {
                Tensor<S>& db = in_grad(1);
                for (std::size_t i = 0; i < in_val(1).numel(); ++i) db.data[i] += g.data[na + i];
            }
            break;
        }
        case Op::kRow: {
            if (in_needs(0)) {
                const std::size_t d = in_val(0).shape[1];
                const std::size_t i = static_cast<std::size_t>(n.iattrs[0]);
                Tensor<S>& dx = in_grad(0);
                for (std::size_t j = 0; j < d; ++j) dx.data[i * d + j] += g.data[j];
            }
            break;
        }
        case Op::kReshape: {
            if (in_needs(0)) {
                Tensor<S>& dx = in_grad(0);
                for (std::size_t i = 0; i < g.numel(); ++i) dx.data[i] += g.data[i];
            }
            break;
        }
        case Op::kBroadcastChannels: {
            if (in_needs(0)) {
                const std::size_t c = n.value.shape[0], hw = n.value.shape[1] * n.value.shape[2];
                Tensor<S>& dv = in_grad(0);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    S acc = S(0);
                    const S* plane = g.data.data() + ch * hw;
                    for (std::size_t i = 0; i < hw; ++i) acc += plane[i];
                    dv.data[ch] += acc;
                }
            }
            break;
        }
    }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace emostyle
