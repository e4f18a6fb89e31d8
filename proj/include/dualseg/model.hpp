#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dualseg/image.hpp"
#include "dualseg/ops.hpp"
#include "dualseg/rng.hpp"

namespace dualseg {

// Network configuration. width_factor scales every channel count, which is
// how the desk-scale tests instantiate the architecture without touching
// its structure.
struct ModelConfig {
    double width_factor = 1.0;
    int64_t stem_channels = 64;
    std::array<int64_t, 4> stage_channels{256, 512, 1024, 2048};
    std::array<int, 4> subblocks_per_stage{3, 4, 6, 3};
    int64_t input_h = 256;
    int64_t input_w = 320;
    bool dual_input = true;
    double binarize_threshold = 0.3;
    double bn_momentum = 0.99;
    double bn_eps = 1e-5;

    int64_t scaled(int64_t full) const {
        return std::max<int64_t>(1, static_cast<int64_t>(std::llround(full * width_factor)));
    }

    void validate() const {
        if (width_factor <= 0.0) throw ConfigError("model: width_factor must be positive");
        if (stem_channels < 1) throw ConfigError("model: stem_channels must be >= 1");
        for (int n : subblocks_per_stage)
            if (n < 1) throw ConfigError("model: subblocks_per_stage entries must be >= 1");
        for (int64_t c : stage_channels)
            if (c < 1) throw ConfigError("model: stage_channels entries must be >= 1");
        if (binarize_threshold < 0.0 || binarize_threshold > 1.0)
            throw ConfigError("model: binarize_threshold must be in [0,1]");
    }
};

// Channel widths derived from the config. The sim branch starts at the stem
// width and doubles at every fusion block; each decoder stage halves its
// (decoder + gated skip) input width.
struct ModelDims {
    int64_t stem = 0;
    std::array<int64_t, 4> stage{};      // real residual stage outputs
    std::array<int64_t, 4> mid{};        // bottleneck mid widths (stage/4)
    int64_t sim_stem = 0;
    std::array<int64_t, 4> sim_block{};  // fusion block outputs
    int64_t dec_in0 = 0;                 // decoder entry width at H/32
    std::array<int64_t, 4> dec_skip{};   // skip widths consumed per decoder stage
    std::array<int64_t, 4> dec_in{};
    std::array<int64_t, 4> dec_out{};
};

inline ModelDims model_dims(const ModelConfig& cfg) {
    ModelDims d;
    d.stem = cfg.scaled(cfg.stem_channels);
    for (int i = 0; i < 4; ++i) {
        d.stage[i] = cfg.scaled(cfg.stage_channels[i]);
        d.mid[i] = std::max<int64_t>(1, d.stage[i] / 4);
    }
    d.sim_stem = d.stem;
    int64_t sw = d.sim_stem;
    for (int i = 0; i < 4; ++i) {
        sw *= 2;
        d.sim_block[i] = sw;
    }
    if (cfg.dual_input) {
        d.dec_in0 = d.sim_block[3] + d.stage[3];
        d.dec_skip = {d.stage[2] + d.sim_block[1], d.stage[1] + d.sim_block[0],
                      d.stage[0] + d.sim_stem, d.stem};
    } else {
        d.dec_in0 = d.stage[3];
        d.dec_skip = {d.stage[2], d.stage[1], d.stage[0], d.stem};
    }
    int64_t cur = d.dec_in0;
    for (int i = 0; i < 4; ++i) {
        d.dec_in[i] = cur;
        d.dec_out[i] = std::max<int64_t>(1, (cur + d.dec_skip[i]) / 2);
        cur = d.dec_out[i];
    }
    return d;
}

// Named parameter store. trainable receives gradients and Adam updates;
// buffers are batchnorm running statistics. Path order (std::map) pins the
// checkpoint layout.
template <typename T>
struct ModelParams {
    std::map<std::string, Tensor<T>> trainable;
    std::map<std::string, Tensor<T>> buffers;

    Tensor<T>& p(const std::string& path) {
        auto it = trainable.find(path);
        if (it == trainable.end()) throw Error("missing parameter: " + path);
        return it->second;
    }
    Tensor<T>& buf(const std::string& path) {
        auto it = buffers.find(path);
        if (it == buffers.end()) throw Error("missing buffer: " + path);
        return it->second;
    }
    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& [_, t] : trainable) n += t.numel();
        return n;
    }
};

namespace detail {

template <typename T>
void add_conv(ModelParams<T>& mp, const std::string& path, int64_t cout, int64_t cin, int64_t kh,
              int64_t kw, uint64_t seed) {
    Tensor<T> w({cout, cin, kh, kw}, true);
    Rng rng(hash_combine(seed, fnv1a64(path)));
    const double stddev = std::sqrt(2.0 / static_cast<double>(cin * kh * kw));
    T* p = w.data();
    for (int64_t i = 0; i < w.numel(); ++i) p[i] = static_cast<T>(rng.normal() * stddev);
    mp.trainable.emplace(path + ".weight", std::move(w));
    mp.trainable.emplace(path + ".bias", Tensor<T>({cout}, true));
}

template <typename T>
void add_bn(ModelParams<T>& mp, const std::string& path, int64_t c) {
    mp.trainable.emplace(path + ".gamma", Tensor<T>::full({c}, T(1), true));
    mp.trainable.emplace(path + ".beta", Tensor<T>({c}, true));
    mp.buffers.emplace(path + ".running_mean", Tensor<T>({c}));
    mp.buffers.emplace(path + ".running_var", Tensor<T>::full({c}, T(1)));
}

inline bool stage_needs_projection(int stage_idx, int64_t in_ch, int64_t out_ch) {
    return in_ch != out_ch || stage_idx > 0;  // stages 2-4 stride their first sub-block
}

}  // namespace detail

// Deterministic parameter construction: He fan-in normals for conv weights
// (stream keyed on seed and path), zero biases, identity batchnorm. Two
// models built from the same config share paths and shapes regardless of
// the seed.
template <typename T>
ModelParams<T> build_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    const ModelDims d = model_dims(cfg);
    ModelParams<T> mp;

    detail::add_conv(mp, "real_encoder.stem.conv", d.stem, 3, 7, 7, seed);
    detail::add_bn(mp, "real_encoder.stem.bn", d.stem);
    int64_t in_ch = d.stem;
    for (int s = 0; s < 4; ++s) {
        const int64_t C = d.stage[s], M = d.mid[s];
        for (int j = 0; j < cfg.subblocks_per_stage[s]; ++j) {
            const std::string base =
                "real_encoder.stage" + std::to_string(s + 1) + ".sub" + std::to_string(j + 1);
            const int64_t sub_in = j == 0 ? in_ch : C;
            detail::add_conv(mp, base + ".conv1", M, sub_in, 1, 1, seed);
            detail::add_bn(mp, base + ".bn1", M);
            detail::add_conv(mp, base + ".conv2", M, M, 3, 3, seed);
            detail::add_bn(mp, base + ".bn2", M);
            detail::add_conv(mp, base + ".conv3", C, M, 1, 1, seed);
            detail::add_bn(mp, base + ".bn3", C);
            if (j == 0 && detail::stage_needs_projection(s, sub_in, C)) {
                detail::add_conv(mp, base + ".proj.conv", C, sub_in, 1, 1, seed);
                detail::add_bn(mp, base + ".proj.bn", C);
            }
        }
        in_ch = C;
    }

    if (cfg.dual_input) {
        detail::add_conv(mp, "sim_encoder.stem.conv", d.sim_stem, 1, 7, 7, seed);
        detail::add_bn(mp, "sim_encoder.stem.bn", d.sim_stem);
        int64_t sw = d.sim_stem;
        for (int k = 0; k < 4; ++k) {
            const std::string base = "sim_encoder.block" + std::to_string(k + 1);
            const int64_t cin = sw + d.stage[k];
            const int64_t cout = d.sim_block[k];
            detail::add_conv(mp, base + ".conv1", cout, cin, 1, 1, seed);
            detail::add_bn(mp, base + ".bn1", cout);
            detail::add_conv(mp, base + ".conv2", cout, cout, 3, 3, seed);
            detail::add_bn(mp, base + ".bn2", cout);
            detail::add_conv(mp, base + ".conv3", cout, cout, 3, 3, seed);
            detail::add_bn(mp, base + ".bn3", cout);
            sw = cout;
        }
    }

    for (int k = 0; k < 4; ++k) {
        const std::string base = "decoder.stage" + std::to_string(k + 1);
        detail::add_conv(mp, base + ".att.conv", d.dec_skip[k], d.dec_in[k], 1, 1, seed);
        detail::add_conv(mp, base + ".fuse.conv", d.dec_out[k], d.dec_in[k] + d.dec_skip[k], 3, 3, seed);
        detail::add_bn(mp, base + ".fuse.bn", d.dec_out[k]);
    }
    detail::add_conv(mp, "decoder.head.conv", 1, d.dec_out[3], 1, 1, seed);
    return mp;
}

// Per-stage output shapes observed during a forward pass, for contract tests.
struct ShapeTrace {
    std::vector<std::pair<std::string, Shape>> entries;

    const Shape* find(const std::string& name) const {
        for (const auto& [n, s] : entries)
            if (n == name) return &s;
        return nullptr;
    }
};

// Channel-attention fusion for one decoder stage: the decoder feature
// pools to a per-channel gate in (0,1) that scales the skip feature before
// a 3x3 conv merges the pair. A large positive attention bias opens the
// gate (plain concat+conv); a large negative bias shuts the skip path off.
template <typename T>
struct AttentionFusionParams {
    Tensor<T> att_weight, att_bias;
    Tensor<T> fuse_weight, fuse_bias;
    Tensor<T> bn_gamma, bn_beta, bn_running_mean, bn_running_var;
};

template <typename T>
Tensor<T> attention_fusion(Tape<T>& tape, const AttentionFusionParams<T>& ap,
                           const Tensor<T>& decoder_feat, const Tensor<T>& skip_feat,
                           bool training, T momentum, T eps) {
    if (decoder_feat.dim(2) != skip_feat.dim(2) || decoder_feat.dim(3) != skip_feat.dim(3))
        throw ShapeError("attention_fusion: spatial mismatch " + shape_str(decoder_feat.shape()) +
                         " vs " + shape_str(skip_feat.shape()));
    Tensor<T> pooled = ops::global_avg_pool(tape, decoder_feat);
    Tensor<T> gate = ops::sigmoid(tape, ops::conv2d(tape, pooled, ap.att_weight, ap.att_bias));
    Tensor<T> gated = ops::scale_channels(tape, skip_feat, gate);
    Tensor<T> merged = ops::concat_channels(tape, {decoder_feat, gated});
    Tensor<T> fused = ops::conv2d(tape, merged, ap.fuse_weight, ap.fuse_bias,
                                  ops::Conv2dSpec{1, 1, 1, 1});
    Tensor<T> rm = ap.bn_running_mean, rv = ap.bn_running_var;
    fused = ops::batch_norm2d(tape, fused, ap.bn_gamma, ap.bn_beta, rm, rv, training, momentum, eps);
    return ops::relu(tape, fused);
}

// Full forward pass: real branch (residual encoder), sim branch (stem +
// four fusion blocks fed by the parallel residual stages), attention-fusion
// decoder, sigmoid head. Output is [B,1,H,W] in (0,1).
//
// Resolution schedule for input H x W (both divisible by 32):
//   real:  stem conv H/2, maxpool H/4, stages at H/4, H/8, H/16, H/32
//   sim:   stem H/4; blocks 1-3 downsample to H/8, H/16, H/32; block 4
//          keeps H/32 so its output can join the last residual stage
//   dec:   three upsample+fuse stages to H/4, one fuse at the stem level,
//          then 4x upsample + 1x1 conv + sigmoid back to H x W
template <typename T>
Tensor<T> model_forward(Tape<T>& tape, ModelParams<T>& mp, const ModelConfig& cfg,
                        const Tensor<T>& real, const Tensor<T>& sim, bool training,
                        ShapeTrace* trace = nullptr) {
    if (real.rank() != 4 || real.dim(1) != 3)
        throw ShapeError("model_forward: real input must be [B,3,H,W], got " + shape_str(real.shape()));
    const int64_t H = real.dim(2), W = real.dim(3);
    if (H % 32 != 0 || W % 32 != 0)
        throw ShapeError("model_forward: input H,W must be divisible by 32, got " +
                         shape_str(real.shape()));
    if (cfg.dual_input) {
        if (!sim.defined() || sim.rank() != 4 || sim.dim(1) != 1)
            throw ShapeError("model_forward: sim input must be [B,1,H,W]");
        if (sim.dim(0) != real.dim(0) || sim.dim(2) != H || sim.dim(3) != W)
            throw ShapeError("model_forward: sim " + shape_str(sim.shape()) +
                             " does not match real " + shape_str(real.shape()));
    }
    const T momentum = static_cast<T>(cfg.bn_momentum);
    const T eps = static_cast<T>(cfg.bn_eps);

    auto record = [&](const std::string& name, const Tensor<T>& t) {
        if (trace) trace->entries.emplace_back(name, t.shape());
    };
    auto bn = [&](const std::string& path, const Tensor<T>& x) {
        return ops::batch_norm2d(tape, x, mp.p(path + ".gamma"), mp.p(path + ".beta"),
                                 mp.buf(path + ".running_mean"), mp.buf(path + ".running_var"),
                                 training, momentum, eps);
    };
    auto conv = [&](const std::string& path, const Tensor<T>& x, const ops::Conv2dSpec& spec) {
        return ops::conv2d(tape, x, mp.p(path + ".weight"), mp.p(path + ".bias"), spec);
    };
    auto conv_bn_relu = [&](const std::string& path, const Tensor<T>& x, int64_t k, int64_t stride) {
        const int64_t pad = (k - 1) / 2;
        Tensor<T> y = conv(path + ".conv", x, ops::Conv2dSpec{stride, stride, pad, pad});
        return ops::relu(tape, bn(path + ".bn", y));
    };

    // real branch
    Tensor<T> x = conv_bn_relu("real_encoder.stem", real, 7, 2);
    x = ops::maxpool2d(tape, x, 3, 2, 1);
    record("real.stem", x);
    Tensor<T> stem_out = x;
    std::array<Tensor<T>, 4> stage_out;
    for (int s = 0; s < 4; ++s) {
        for (int j = 0; j < cfg.subblocks_per_stage[s]; ++j) {
            const std::string base =
                "real_encoder.stage" + std::to_string(s + 1) + ".sub" + std::to_string(j + 1);
            const int64_t stride = (j == 0 && s > 0) ? 2 : 1;
            Tensor<T> identity = x;
            // bottleneck: 1x1 reduce, 3x3 (strided), 1x1 expand, residual add
            Tensor<T> h = ops::relu(tape, bn(base + ".bn1", conv(base + ".conv1", x, {})));
            h = ops::relu(tape, bn(base + ".bn2", conv(base + ".conv2", h,
                                                       ops::Conv2dSpec{stride, stride, 1, 1})));
            h = bn(base + ".bn3", conv(base + ".conv3", h, {}));
            if (mp.trainable.count(base + ".proj.conv.weight")) {
                identity = bn(base + ".proj.bn",
                              conv(base + ".proj.conv", x, ops::Conv2dSpec{stride, stride, 0, 0}));
            }
            x = ops::relu(tape, ops::add(tape, h, identity));
        }
        stage_out[s] = x;
        record("real.stage" + std::to_string(s + 1), x);
    }

    // sim branch
    Tensor<T> sim_stem_out;
    std::array<Tensor<T>, 4> sim_block_out;
    if (cfg.dual_input) {
        Tensor<T> s = conv_bn_relu("sim_encoder.stem", sim, 7, 2);
        s = ops::maxpool2d(tape, s, 3, 2, 1);
        sim_stem_out = s;
        record("sim.stem", s);
        for (int k = 0; k < 4; ++k) {
            const std::string base = "sim_encoder.block" + std::to_string(k + 1);
            Tensor<T> c = ops::concat_channels(tape, {s, stage_out[k]});
            c = ops::relu(tape, bn(base + ".bn1", conv(base + ".conv1", c, {})));
            c = ops::relu(tape, bn(base + ".bn2", conv(base + ".conv2", c, ops::Conv2dSpec{1, 1, 1, 1})));
            const int64_t stride = k < 3 ? 2 : 1;
            c = ops::relu(tape, bn(base + ".bn3", conv(base + ".conv3", c,
                                                       ops::Conv2dSpec{stride, stride, 1, 1})));
            s = c;
            sim_block_out[k] = s;
            record("sim.block" + std::to_string(k + 1), s);
        }
    }

    // decoder
    Tensor<T> d = cfg.dual_input
                      ? ops::concat_channels(tape, {sim_block_out[3], stage_out[3]})
                      : stage_out[3];
    std::array<Tensor<T>, 4> skips;
    if (cfg.dual_input) {
        skips[0] = ops::concat_channels(tape, {stage_out[2], sim_block_out[1]});
        skips[1] = ops::concat_channels(tape, {stage_out[1], sim_block_out[0]});
        skips[2] = ops::concat_channels(tape, {stage_out[0], sim_stem_out});
        skips[3] = stem_out;
    } else {
        skips = {stage_out[2], stage_out[1], stage_out[0], stem_out};
    }
    for (int k = 0; k < 4; ++k) {
        if (k < 3) d = ops::upsample_nearest2x(tape, d);
        const std::string base = "decoder.stage" + std::to_string(k + 1);
        AttentionFusionParams<T> ap{mp.p(base + ".att.conv.weight"), mp.p(base + ".att.conv.bias"),
                                    mp.p(base + ".fuse.conv.weight"), mp.p(base + ".fuse.conv.bias"),
                                    mp.p(base + ".fuse.bn.gamma"),   mp.p(base + ".fuse.bn.beta"),
                                    mp.buf(base + ".fuse.bn.running_mean"),
                                    mp.buf(base + ".fuse.bn.running_var")};
        d = attention_fusion(tape, ap, d, skips[k], training, momentum, eps);
        record("decoder.stage" + std::to_string(k + 1), d);
    }
    d = ops::upsample_nearest2x(tape, ops::upsample_nearest2x(tape, d));
    Tensor<T> out = ops::sigmoid(tape, conv("decoder.head.conv", d, {}));
    record("output", out);
    return out;
}

// Threshold rule is inclusive: probability exactly at the threshold is
// foreground.
template <typename T>
std::vector<Mask> binarize(const Tensor<T>& prob, double threshold) {
    if (prob.rank() != 4 || prob.dim(1) != 1)
        throw ShapeError("binarize: expected [B,1,H,W], got " + shape_str(prob.shape()));
    const int64_t B = prob.dim(0), H = prob.dim(2), W = prob.dim(3);
    std::vector<Mask> masks;
    masks.reserve(static_cast<size_t>(B));
    const T* p = prob.data();
    for (int64_t b = 0; b < B; ++b) {
        Mask m(static_cast<int>(W), static_cast<int>(H), 1);
        const T* pb = p + b * H * W;
        for (int64_t i = 0; i < H * W; ++i)
            m.px[static_cast<size_t>(i)] = static_cast<double>(pb[i]) >= threshold ? 255 : 0;
        masks.push_back(std::move(m));
    }
    return masks;
}

}  // namespace dualseg
