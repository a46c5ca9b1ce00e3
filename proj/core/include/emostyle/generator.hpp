#pragma once

#include <cstdint>
#include <functional>

#include "emostyle/image.hpp"
#include "emostyle/params.hpp"
#include "emostyle/rng.hpp"
#include "emostyle/tape.hpp"
#include "emostyle/tensor.hpp"

namespace emostyle {

// sentinel for "condition dropped": the learned null embedding is used instead
inline constexpr NodeId kNoNode = -1;

// Rectified flow: x_t = alpha(t) x0 + sigma(t) eps, target velocity eps - x0.
struct FlowSchedule {
    static double alpha(double t) { return 1.0 - t; }
    static double sigma(double t) { return t; }
    static double weight(double) { return 1.0; }
};

// vel.time.*, vel.cond.*, vel.stem.*, vel.blk{0..3}.{conv1,film,conv2}.*,
// vel.out.* (zero-init so the initial field is identically zero), vel.null.*
template <class S>
void add_velocity_params(ParamSet<S>& ps, Rng rng);

// Sinusoidal features of the scalar time, 16 frequency pairs. {1,32}
template <class S>
Tensor<S> time_features(double t);

// Velocity field on the tape. x_t is {3,H,W}; content enters twice: tokens
// {16,64} pooled into the modulation vector and the raw image stacked onto
// x_t at the stem (pooling alone cannot carry layout). Pass kNoNode to
// substitute the learned null for either condition; tokens and image drop
// together as "content".
template <class S>
NodeId velocity_node(Tape<S>& tape, NodeId x_t, NodeId content_image, NodeId content_tokens, NodeId style,
                     double t, const ParamSet<S>& ps);

// Tape-free forward for sampling. Bit-identical to velocity_node: both run
// the same kernels in the same order (a unit test pins this).
template <class S>
Tensor<S> velocity_eval(const Tensor<S>& x_t, const Tensor<S>* content_image, const Tensor<S>* content_tokens,
                        const Tensor<S>* style, double t, const ParamSet<S>& ps);

// w(t) * mean squared error against the rectified-flow target. t in (0,1).
template <class S>
NodeId fm_loss_node(Tape<S>& tape, const Tensor<S>& x0, NodeId content_image, NodeId content_tokens,
                    NodeId style, double t, const Tensor<S>& eps, const ParamSet<S>& ps);

template <class S>
double fm_loss(const Tensor<S>& x0, const Tensor<S>* content_image, const Tensor<S>* content_tokens,
               const Tensor<S>* style, double t, const Tensor<S>& eps, const ParamSet<S>& ps);

struct GuidanceDrop {
    bool content = false;
    bool style = false;
};

// Two independent seeded coin flips (content first, then style; both always
// drawn so the stream position is input-independent).
GuidanceDrop apply_guidance_dropout(double p_drop_style, double p_drop_content, Rng& rng);

template <class S>
using VelocityFn = std::function<Tensor<S>(const Tensor<S>&, double)>;

// Euler from t=1 down to 0, t evaluated at step starts, step 1/steps. The
// state accumulates in double no matter what S is, so a constant field
// integrates exactly.
template <class S>
Tensor<S> integrate_euler(const Tensor<S>& x1, const VelocityFn<S>& velocity, int steps);

// Dual classifier-free guidance:
//   v_hat = v(0,0) + s_content*(v(c,0) - v(0,0)) + s_style*(v(c,z) - v(c,0))
// with exact single- or two-eval collapses when scales make terms cancel.
// Pass nullptr content for prompt-only sampling (nulls fill in); the result
// is clamped to [0,1].
template <class S>
Image sample(const Tensor<S>* content_tokens, const Tensor<S>* content_image, const Tensor<S>* style,
             std::size_t side, int steps, double s_style, double s_content, std::uint64_t seed,
             const ParamSet<S>& ps);

}  // namespace emostyle
