#include "emostyle/reasoner.hpp"

#include <cmath>
#include <string>

#include "emostyle/errors.hpp"

namespace emostyle {

namespace {

void validate_shape(const ReasonerShape& shape) {
    if (shape.blocks < 1) throw ValidationError("reasoner: blocks must be >= 1");
    if (shape.heads < 1 || shape.width % shape.heads != 0)
        throw ValidationError("reasoner: width " + std::to_string(shape.width) + " not divisible by heads " +
                              std::to_string(shape.heads));
    if (shape.mlp_hidden < 1 || shape.d_s < 1) throw ValidationError("reasoner: zero-sized layer");
}

std::string blk(std::size_t i, const char* suffix) { return "reasoner.blk" + std::to_string(i) + suffix; }

}  // namespace

template <class S>
void add_reasoner_params(ParamSet<S>& ps, const ReasonerShape& shape, Rng rng) {
    validate_shape(shape);
    const std::size_t w = shape.width;
    const double sw = 1.0 / std::sqrt(static_cast<double>(w));
    const double sh = 1.0 / std::sqrt(static_cast<double>(shape.mlp_hidden));

    ps.add("reasoner.emo.w", Tensor<S>::random_normal({8, w}, rng.derive("reasoner.emo.w"), 0.5));
    ps.add("reasoner.emo.b", Tensor<S>::zeros({w}));
    for (std::size_t i = 0; i < shape.blocks; ++i) {
        ps.add(blk(i, ".ln1.g"), Tensor<S>::full({w}, S(1)));
        ps.add(blk(i, ".ln1.b"), Tensor<S>::zeros({w}));
        for (const char* m : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
            ps.add(blk(i, m), Tensor<S>::random_normal({w, w}, rng.derive(blk(i, m)), sw));
        for (const char* m : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"})
            ps.add(blk(i, m), Tensor<S>::zeros({w}));
        ps.add(blk(i, ".ln2.g"), Tensor<S>::full({w}, S(1)));
        ps.add(blk(i, ".ln2.b"), Tensor<S>::zeros({w}));
        ps.add(blk(i, ".mlp.w1"), Tensor<S>::random_normal({w, shape.mlp_hidden}, rng.derive(blk(i, ".mlp.w1")), sw));
        ps.add(blk(i, ".mlp.b1"), Tensor<S>::zeros({shape.mlp_hidden}));
        ps.add(blk(i, ".mlp.w2"), Tensor<S>::random_normal({shape.mlp_hidden, w}, rng.derive(blk(i, ".mlp.w2")), sh));
        ps.add(blk(i, ".mlp.b2"), Tensor<S>::zeros({w}));
    }
    ps.add("reasoner.head.w", Tensor<S>::random_normal({w, shape.d_s}, rng.derive("reasoner.head.w"), sw));
    ps.add("reasoner.head.b", Tensor<S>::zeros({shape.d_s}));
}

template <class S>
NodeId reasoner_blocks_node(Tape<S>& tape, NodeId seq, const ParamSet<S>& ps, const ReasonerShape& shape) {
    validate_shape(shape);
    const Tensor<S>& sv = tape.value(seq);
    if (sv.rank() != 2 || sv.shape[1] != shape.width)
        throw ShapeError("reasoner: sequence " + shape_str(sv.shape) + ", width " + std::to_string(shape.width));
    NodeId x = seq;
    for (std::size_t i = 0; i < shape.blocks; ++i) {
        auto p = [&](const char* suffix) { return tape.param(ps, blk(i, suffix)); };
        NodeId att = tape.attention(tape.layer_norm(x, p(".ln1.g"), p(".ln1.b")), p(".attn.wq"), p(".attn.bq"),
                                    p(".attn.wk"), p(".attn.bk"), p(".attn.wv"), p(".attn.bv"), p(".attn.wo"),
                                    p(".attn.bo"), static_cast<int>(shape.heads));
        NodeId xbar = tape.add(att, x);
        NodeId h = tape.gelu(affine(tape, tape.layer_norm(xbar, p(".ln2.g"), p(".ln2.b")), p(".mlp.w1"), p(".mlp.b1")));
        x = tape.add(affine(tape, h, p(".mlp.w2"), p(".mlp.b2")), xbar);
    }
    return x;
}

template <class S>
NodeId reason_node(Tape<S>& tape, const Tensor<S>& emotion, NodeId content, const ParamSet<S>& ps,
                   const ReasonerShape& shape) {
    if (emotion.shape != Shape{8}) throw ShapeError("reason: emotion must be {8}, got " + shape_str(emotion.shape));
    Tensor<S> emo_row({1, 8}, emotion.data);
    NodeId emo_tok = affine(tape, tape.constant(std::move(emo_row)), tape.param(ps, "reasoner.emo.w"),
                            tape.param(ps, "reasoner.emo.b"));
    NodeId seq = tape.concat_rows(emo_tok, content);
    NodeId out = reasoner_blocks_node(tape, seq, ps, shape);
    NodeId q0 = tape.reshape(tape.row(out, 0), {1, shape.width});
    NodeId q = affine(tape, q0, tape.param(ps, "reasoner.head.w"), tape.param(ps, "reasoner.head.b"));
    return tape.reshape(q, {shape.d_s});
}

template <class S>
Tensor<S> reason(const Tensor<S>& emotion, const Tensor<S>& content, const ParamSet<S>& ps,
                 const ReasonerShape& shape) {
    Tape<S> tape;
    return tape.value(reason_node(tape, emotion, tape.constant(content), ps, shape));
}

template void add_reasoner_params<float>(ParamSet<float>&, const ReasonerShape&, Rng);
template void add_reasoner_params<double>(ParamSet<double>&, const ReasonerShape&, Rng);
template NodeId reasoner_blocks_node<float>(Tape<float>&, NodeId, const ParamSet<float>&, const ReasonerShape&);
template NodeId reasoner_blocks_node<double>(Tape<double>&, NodeId, const ParamSet<double>&, const ReasonerShape&);
template NodeId reason_node<float>(Tape<float>&, const Tensor<float>&, NodeId, const ParamSet<float>&,
                                   const ReasonerShape&);
template NodeId reason_node<double>(Tape<double>&, const Tensor<double>&, NodeId, const ParamSet<double>&,
                                    const ReasonerShape&);
template Tensor<float> reason<float>(const Tensor<float>&, const Tensor<float>&, const ParamSet<float>&,
                                     const ReasonerShape&);
template Tensor<double> reason<double>(const Tensor<double>&, const Tensor<double>&, const ParamSet<double>&,
                                       const ReasonerShape&);

}  // namespace emostyle
