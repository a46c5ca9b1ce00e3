#include "emostyle/generator.hpp"

#include <cmath>
#include <string>

#include "emostyle/errors.hpp"
#include "kernels.hpp"

namespace emostyle {

namespace {

constexpr std::size_t kChannels = 32;
constexpr std::size_t kBlocks = 4;
constexpr std::size_t kCond = 64;
constexpr std::size_t kTimeDim = 32;

std::string blk(std::size_t i, const char* suffix) { return "vel.blk" + std::to_string(i) + suffix; }

}  // namespace

template <class S>
void add_velocity_params(ParamSet<S>& ps, Rng rng) {
    ps.add("vel.time.w", Tensor<S>::random_normal({kTimeDim, kCond}, rng.derive("vel.time.w"),
                                                  1.0 / std::sqrt(double(kTimeDim))));
    ps.add("vel.time.b", Tensor<S>::zeros({kCond}));
    ps.add("vel.cond.w", Tensor<S>::random_normal({3 * kCond, kCond}, rng.derive("vel.cond.w"),
                                                  1.0 / std::sqrt(double(3 * kCond))));
    ps.add("vel.cond.b", Tensor<S>::zeros({kCond}));
    ps.add("vel.stem.w",
           Tensor<S>::random_normal({kChannels, 6, 3, 3}, rng.derive("vel.stem.w"), 1.0 / std::sqrt(54.0)));
    ps.add("vel.stem.b", Tensor<S>::zeros({kChannels}));
    for (std::size_t i = 0; i < kBlocks; ++i) {
        const double sc = 1.0 / std::sqrt(double(kChannels * 9));
        ps.add(blk(i, ".conv1.w"),
               Tensor<S>::random_normal({kChannels, kChannels, 3, 3}, rng.derive(blk(i, ".conv1.w")), sc));
        ps.add(blk(i, ".conv1.b"), Tensor<S>::zeros({kChannels}));
        ps.add(blk(i, ".film.w"),
               Tensor<S>::random_normal({kCond, 2 * kChannels}, rng.derive(blk(i, ".film.w")), 0.05));
        ps.add(blk(i, ".film.b"), Tensor<S>::zeros({2 * kChannels}));
        ps.add(blk(i, ".conv2.w"),
               Tensor<S>::random_normal({kChannels, kChannels, 3, 3}, rng.derive(blk(i, ".conv2.w")), sc));
        ps.add(blk(i, ".conv2.b"), Tensor<S>::zeros({kChannels}));
    }
    // zero output conv: the untrained field is exactly zero
    ps.add("vel.out.w", Tensor<S>::zeros({3, kChannels, 3, 3}));
    ps.add("vel.out.b", Tensor<S>::zeros({3}));
    ps.add("vel.null.content_vec",
           Tensor<S>::random_normal({kCond}, rng.derive("vel.null.content_vec"), 0.02));
    ps.add("vel.null.style", Tensor<S>::random_normal({kCond}, rng.derive("vel.null.style"), 0.02));
    ps.add("vel.null.content_img", Tensor<S>::full({3}, S(0.5)));
}

template <class S>
Tensor<S> time_features(double t) {
    Tensor<S> f = Tensor<S>::zeros({1, kTimeDim});
    for (std::size_t i = 0; i < kTimeDim / 2; ++i) {
        const double w = std::pow(1000.0, static_cast<double>(i) / 15.0);
        f.data[2 * i] = static_cast<S>(std::sin(t * w));
        f.data[2 * i + 1] = static_cast<S>(std::cos(t * w));
    }
    return f;
}

template <class S>
NodeId velocity_node(Tape<S>& tape, NodeId x_t, NodeId content_image, NodeId content_tokens, NodeId style,
                     double t, const ParamSet<S>& ps) {
    const Tensor<S>& xv = tape.value(x_t);
    if (xv.rank() != 3 || xv.shape[0] != 3)
        throw ShapeError("velocity: x_t must be {3,H,W}, got " + shape_str(xv.shape));
    const std::size_t h = xv.shape[1], w = xv.shape[2];

    NodeId temb = tape.reshape(
        affine(tape, tape.constant(time_features<S>(t)), tape.param(ps, "vel.time.w"), tape.param(ps, "vel.time.b")),
        {kCond});
    NodeId pooled = content_tokens == kNoNode ? tape.param(ps, "vel.null.content_vec")
                                              : tape.mean_rows(content_tokens);
    NodeId stylev = style == kNoNode ? tape.param(ps, "vel.null.style") : style;
    NodeId cin = tape.reshape(tape.concat_vec(tape.concat_vec(pooled, stylev), temb), {1, 3 * kCond});
    NodeId cond = tape.gelu(affine(tape, cin, tape.param(ps, "vel.cond.w"), tape.param(ps, "vel.cond.b")));

    NodeId cimg = content_image == kNoNode
                      ? tape.broadcast_channels(tape.param(ps, "vel.null.content_img"), h, w)
                      : content_image;
    NodeId hid = tape.gelu(tape.conv3x3(tape.concat_channels(x_t, cimg), tape.param(ps, "vel.stem.w"),
                                        tape.param(ps, "vel.stem.b")));
    for (std::size_t i = 0; i < kBlocks; ++i) {
        NodeId gb = tape.reshape(affine(tape, cond, tape.param(ps, blk(i, ".film.w")), tape.param(ps, blk(i, ".film.b"))),
                                 {2, kChannels});
        NodeId c1 = tape.conv3x3(hid, tape.param(ps, blk(i, ".conv1.w")), tape.param(ps, blk(i, ".conv1.b")));
        NodeId mod = tape.gelu(tape.film(c1, tape.row(gb, 0), tape.row(gb, 1)));
        NodeId c2 = tape.conv3x3(mod, tape.param(ps, blk(i, ".conv2.w")), tape.param(ps, blk(i, ".conv2.b")));
        hid = tape.add(c2, hid);
    }
    return tape.conv3x3(hid, tape.param(ps, "vel.out.w"), tape.param(ps, "vel.out.b"));
}

namespace {

// kernel-for-kernel mirror of the tape graph above
template <class S>
void plain_affine(const S* x, std::size_t rows, std::size_t in, std::size_t out, const Tensor<S>& w,
                  const Tensor<S>& b, S* y) {
    detail::gemm_nn(x, w.data.data(), y, rows, in, out);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out; ++j) y[r * out + j] += b.data[j];
}

template <class S>
void plain_conv3x3(const S* x, std::size_t c, std::size_t h, std::size_t w, const Tensor<S>& wt,
                   const Tensor<S>& b, S* y, std::vector<S>& scratch) {
    const std::size_t hw = h * w, co = wt.shape[0];
    scratch.assign(c * 9 * hw, S(0));
    detail::im2col3x3(x, scratch.data(), c, h, w);
    for (std::size_t i = 0; i < co * hw; ++i) y[i] = S(0);
    detail::gemm_nn_acc(wt.data.data(), scratch.data(), y, co, c * 9, hw);
    for (std::size_t oc = 0; oc < co; ++oc) {
        const S bb = b.data[oc];
        S* plane = y + oc * hw;
        for (std::size_t i = 0; i < hw; ++i) plane[i] += bb;
    }
}

}  // namespace

template <class S>
Tensor<S> velocity_eval(const Tensor<S>& x_t, const Tensor<S>* content_image, const Tensor<S>* content_tokens,
                        const Tensor<S>* style, double t, const ParamSet<S>& ps) {
    if (x_t.rank() != 3 || x_t.shape[0] != 3)
        throw ShapeError("velocity: x_t must be {3,H,W}, got " + shape_str(x_t.shape));
    const std::size_t h = x_t.shape[1], w = x_t.shape[2], hw = h * w;

    Tensor<S> tf = time_features<S>(t);
    std::vector<S> temb(kCond);
    plain_affine(tf.data.data(), 1, kTimeDim, kCond, ps.param("vel.time.w"), ps.param("vel.time.b"), temb.data());

    std::vector<S> cin(3 * kCond);
    if (content_tokens) {
        const Tensor<S>& tok = *content_tokens;
        if (tok.rank() != 2 || tok.shape[1] != kCond)
            throw ShapeError("velocity: content tokens " + shape_str(tok.shape));
        const std::size_t rows = tok.shape[0];
        for (std::size_t j = 0; j < kCond; ++j) cin[j] = S(0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < kCond; ++j) cin[j] += tok.data[r * kCond + j];
        const S inv = S(1) / static_cast<S>(rows);
        for (std::size_t j = 0; j < kCond; ++j) cin[j] *= inv;
    } else {
        const auto& nv = ps.param("vel.null.content_vec");
        for (std::size_t j = 0; j < kCond; ++j) cin[j] = nv.data[j];
    }
    const Tensor<S>& sv = style ? *style : ps.param("vel.null.style");
    if (sv.shape != Shape{kCond}) throw ShapeError("velocity: style " + shape_str(sv.shape));
    for (std::size_t j = 0; j < kCond; ++j) cin[kCond + j] = sv.data[j];
    for (std::size_t j = 0; j < kCond; ++j) cin[2 * kCond + j] = temb[j];

    std::vector<S> cond(kCond);
    plain_affine(cin.data(), 1, 3 * kCond, kCond, ps.param("vel.cond.w"), ps.param("vel.cond.b"), cond.data());
    for (S& v : cond) v = detail::gelu_fwd(v);

    std::vector<S> stacked(6 * hw);
    std::copy(x_t.data.begin(), x_t.data.end(), stacked.begin());
    if (content_image) {
        if (!content_image->same_shape(x_t))
            throw ShapeError("velocity: content image " + shape_str(content_image->shape) + " vs x_t " +
                             shape_str(x_t.shape));
        std::copy(content_image->data.begin(), content_image->data.end(), stacked.begin() + 3 * hw);
    } else {
        const auto& ni = ps.param("vel.null.content_img");
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < hw; ++i) stacked[(3 + c) * hw + i] = ni.data[c];
    }

    std::vector<S> scratch;
    std::vector<S> hid(kChannels * hw), buf1(kChannels * hw), buf2(kChannels * hw);
    plain_conv3x3(stacked.data(), 6, h, w, ps.param("vel.stem.w"), ps.param("vel.stem.b"), hid.data(), scratch);
    for (S& v : hid) v = detail::gelu_fwd(v);

    for (std::size_t i = 0; i < kBlocks; ++i) {
        std::vector<S> gb(2 * kChannels);
        plain_affine(cond.data(), 1, kCond, 2 * kChannels, ps.param(blk(i, ".film.w")), ps.param(blk(i, ".film.b")),
                     gb.data());
        plain_conv3x3(hid.data(), kChannels, h, w, ps.param(blk(i, ".conv1.w")), ps.param(blk(i, ".conv1.b")),
                      buf1.data(), scratch);
        for (std::size_t c = 0; c < kChannels; ++c) {
            const S g = S(1) + gb[c];
            const S bb = gb[kChannels + c];
            S* plane = buf1.data() + c * hw;
            for (std::size_t p = 0; p < hw; ++p) plane[p] = detail::gelu_fwd(plane[p] * g + bb);
        }
        plain_conv3x3(buf1.data(), kChannels, h, w, ps.param(blk(i, ".conv2.w")), ps.param(blk(i, ".conv2.b")),
                      buf2.data(), scratch);
        for (std::size_t p = 0; p < kChannels * hw; ++p) hid[p] = buf2[p] + hid[p];
    }

    Tensor<S> out = Tensor<S>::zeros({3, h, w});
    plain_conv3x3(hid.data(), kChannels, h, w, ps.param("vel.out.w"), ps.param("vel.out.b"), out.data.data(),
                  scratch);
    return out;
}

template <class S>
NodeId fm_loss_node(Tape<S>& tape, const Tensor<S>& x0, NodeId content_image, NodeId content_tokens,
                    NodeId style, double t, const Tensor<S>& eps, const ParamSet<S>& ps) {
    if (!(t > 0.0 && t < 1.0)) throw ValidationError("fm_loss: t = " + std::to_string(t) + " outside (0,1)");
    if (!x0.same_shape(eps))
        throw ShapeError("fm_loss: x0 " + shape_str(x0.shape) + " vs eps " + shape_str(eps.shape));
    const S a = static_cast<S>(FlowSchedule::alpha(t));
    const S sg = static_cast<S>(FlowSchedule::sigma(t));
    Tensor<S> x_t = Tensor<S>::zeros(x0.shape);
    Tensor<S> target = Tensor<S>::zeros(x0.shape);
    for (std::size_t i = 0; i < x0.numel(); ++i) {
        x_t.data[i] = a * x0.data[i] + sg * eps.data[i];
        target.data[i] = eps.data[i] - x0.data[i];
    }
    NodeId v = velocity_node(tape, tape.constant(std::move(x_t)), content_image, content_tokens, style, t, ps);
    NodeId loss = tape.mse(v, tape.constant(std::move(target)));
    const double wt = FlowSchedule::weight(t);
    return wt == 1.0 ? loss : tape.scale(loss, wt);
}

template <class S>
double fm_loss(const Tensor<S>& x0, const Tensor<S>* content_image, const Tensor<S>* content_tokens,
               const Tensor<S>* style, double t, const Tensor<S>& eps, const ParamSet<S>& ps) {
    Tape<S> tape;
    NodeId ci = content_image ? tape.constant(*content_image) : kNoNode;
    NodeId ct = content_tokens ? tape.constant(*content_tokens) : kNoNode;
    NodeId st = style ? tape.constant(*style) : kNoNode;
    return tape.scalar(fm_loss_node(tape, x0, ci, ct, st, t, eps, ps));
}

GuidanceDrop apply_guidance_dropout(double p_drop_style, double p_drop_content, Rng& rng) {
    if (p_drop_style < 0.0 || p_drop_style > 1.0 || p_drop_content < 0.0 || p_drop_content > 1.0)
        throw ValidationError("guidance dropout rates must be in [0,1]");
    GuidanceDrop d;
    // both coins always drawn, content first, so the stream stays aligned
    // uniform() is [0, 1), so `< p` hits with probability exactly p; p=0 never, p=1 always
    d.content = rng.uniform() < p_drop_content;
    d.style = rng.uniform() < p_drop_style;
    return d;
}

template <class S>
Tensor<S> integrate_euler(const Tensor<S>& x1, const VelocityFn<S>& velocity, int steps) {
    if (steps < 1) throw ValidationError("integrate_euler: steps must be >= 1");
    std::vector<double> state(x1.numel());
    for (std::size_t i = 0; i < x1.numel(); ++i) state[i] = static_cast<double>(x1.data[i]);
    const double delta = 1.0 / static_cast<double>(steps);
    Tensor<S> xs = x1;
    for (int k = 0; k < steps; ++k) {
        const double t = static_cast<double>(steps - k) / static_cast<double>(steps);
        for (std::size_t i = 0; i < state.size(); ++i) xs.data[i] = static_cast<S>(state[i]);
        Tensor<S> v = velocity(xs, t);
        if (!v.same_shape(x1))
            throw ShapeError("integrate_euler: velocity " + shape_str(v.shape) + " vs state " + shape_str(x1.shape));
        check_finite(v, "integrate_euler velocity");
        for (std::size_t i = 0; i < state.size(); ++i) state[i] -= delta * static_cast<double>(v.data[i]);
    }
    Tensor<S> out = Tensor<S>::zeros(x1.shape);
    for (std::size_t i = 0; i < state.size(); ++i) out.data[i] = static_cast<S>(state[i]);
    return out;
}

template <class S>
Image sample(const Tensor<S>* content_tokens, const Tensor<S>* content_image, const Tensor<S>* style,
             std::size_t side, int steps, double s_style, double s_content, std::uint64_t seed,
             const ParamSet<S>& ps) {
    if (steps < 1) throw ValidationError("sample: steps must be >= 1");
    if (content_image && (content_image->rank() != 3 || content_image->shape[1] != side))
        throw ShapeError("sample: content image " + shape_str(content_image->shape) + " vs side " +
                         std::to_string(side));

    Tensor<S> x1 = Tensor<S>::random_normal({3, side, side}, Rng(seed).derive("sample.init"), 1.0);

    VelocityFn<S> fn = [&](const Tensor<S>& x, double t) -> Tensor<S> {
        // exact collapses first so collapsed trajectories are bit-identical
        // to directly-conditioned ones
        if (s_content == 1.0 && s_style == 1.0) return velocity_eval<S>(x, content_image, content_tokens, style, t, ps);
        if (s_content == 1.0 && s_style == 0.0) return velocity_eval<S>(x, content_image, content_tokens, nullptr, t, ps);
        if (s_content == 1.0) {
            Tensor<S> vc = velocity_eval<S>(x, content_image, content_tokens, nullptr, t, ps);
            Tensor<S> vs = velocity_eval<S>(x, content_image, content_tokens, style, t, ps);
            for (std::size_t i = 0; i < vc.numel(); ++i)
                vc.data[i] = static_cast<S>(static_cast<double>(vc.data[i]) +
                                            s_style * (static_cast<double>(vs.data[i]) -
                                                       static_cast<double>(vc.data[i])));
            return vc;
        }
        Tensor<S> vn = velocity_eval<S>(x, nullptr, nullptr, nullptr, t, ps);
        Tensor<S> vc = velocity_eval<S>(x, content_image, content_tokens, nullptr, t, ps);
        if (s_style == 0.0) {
            for (std::size_t i = 0; i < vn.numel(); ++i)
                vn.data[i] = static_cast<S>(static_cast<double>(vn.data[i]) +
                                            s_content * (static_cast<double>(vc.data[i]) -
                                                         static_cast<double>(vn.data[i])));
            return vn;
        }
        Tensor<S> vs = velocity_eval<S>(x, content_image, content_tokens, style, t, ps);
        for (std::size_t i = 0; i < vn.numel(); ++i)
            vn.data[i] = static_cast<S>(
                static_cast<double>(vn.data[i]) +
                s_content * (static_cast<double>(vc.data[i]) - static_cast<double>(vn.data[i])) +
                s_style * (static_cast<double>(vs.data[i]) - static_cast<double>(vc.data[i])));
        return vn;
    };

    Tensor<S> x0 = integrate_euler(x1, fn, steps);
    Image img(side, side);
    for (std::size_t i = 0; i < x0.numel(); ++i) img.data[i] = static_cast<float>(x0.data[i]);
    clamp01(img);
    return img;
}

template void add_velocity_params<float>(ParamSet<float>&, Rng);
template void add_velocity_params<double>(ParamSet<double>&, Rng);
template Tensor<float> time_features<float>(double);
template Tensor<double> time_features<double>(double);
template NodeId velocity_node<float>(Tape<float>&, NodeId, NodeId, NodeId, NodeId, double, const ParamSet<float>&);
template NodeId velocity_node<double>(Tape<double>&, NodeId, NodeId, NodeId, NodeId, double,
                                      const ParamSet<double>&);
template Tensor<float> velocity_eval<float>(const Tensor<float>&, const Tensor<float>*, const Tensor<float>*,
                                            const Tensor<float>*, double, const ParamSet<float>&);
template Tensor<double> velocity_eval<double>(const Tensor<double>&, const Tensor<double>*, const Tensor<double>*,
                                              const Tensor<double>*, double, const ParamSet<double>&);
template NodeId fm_loss_node<float>(Tape<float>&, const Tensor<float>&, NodeId, NodeId, NodeId, double,
                                    const Tensor<float>&, const ParamSet<float>&);
template NodeId fm_loss_node<double>(Tape<double>&, const Tensor<double>&, NodeId, NodeId, NodeId, double,
                                     const Tensor<double>&, const ParamSet<double>&);
template double fm_loss<float>(const Tensor<float>&, const Tensor<float>*, const Tensor<float>*,
                               const Tensor<float>*, double, const Tensor<float>&, const ParamSet<float>&);
template double fm_loss<double>(const Tensor<double>&, const Tensor<double>*, const Tensor<double>*,
                                const Tensor<double>*, double, const Tensor<double>&, const ParamSet<double>&);
template Tensor<float> integrate_euler<float>(const Tensor<float>&, const VelocityFn<float>&, int);
template Tensor<double> integrate_euler<double>(const Tensor<double>&, const VelocityFn<double>&, int);
template Image sample<float>(const Tensor<float>*, const Tensor<float>*, const Tensor<float>*, std::size_t, int,
                             double, double, std::uint64_t, const ParamSet<float>&);
template Image sample<double>(const Tensor<double>*, const Tensor<double>*, const Tensor<double>*, std::size_t,
                              int, double, double, std::uint64_t, const ParamSet<double>&);

}  // namespace emostyle
