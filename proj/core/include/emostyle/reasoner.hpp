#pragma once

#include <cstddef>

#include "emostyle/params.hpp"
#include "emostyle/tape.hpp"
#include "emostyle/tensor.hpp"

namespace emostyle {

// Four pre-norm residual blocks by default; every size is explicit so tests
// can shrink the whole stack.
struct ReasonerShape {
    std::size_t blocks = 4;
    std::size_t heads = 4;
    std::size_t width = 64;
    std::size_t mlp_hidden = 256;
    std::size_t d_s = 64;
};

// reasoner.emo.{w,b}, reasoner.blk{i}.{ln1,attn,ln2,mlp}.*, reasoner.head.{w,b}
template <class S>
void add_reasoner_params(ParamSet<S>& ps, const ReasonerShape& shape, Rng rng);

// The residual stack alone: x_bar = MSA(LN(x)) + x; x = MLP(LN(x_bar)) + x_bar,
// applied blocks times over an {T,width} sequence.
template <class S>
NodeId reasoner_blocks_node(Tape<S>& tape, NodeId seq, const ParamSet<S>& ps, const ReasonerShape& shape);

// Full query path: project the emotion one-hot, prepend it to the content
// tokens, run the blocks, read the head at position 0. {d_s}
template <class S>
NodeId reason_node(Tape<S>& tape, const Tensor<S>& emotion, NodeId content, const ParamSet<S>& ps,
                   const ReasonerShape& shape);

template <class S>
Tensor<S> reason(const Tensor<S>& emotion, const Tensor<S>& content, const ParamSet<S>& ps,
                 const ReasonerShape& shape);

}  // namespace emostyle
