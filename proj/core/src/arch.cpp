#include "sfa/arch.hpp"

#include <cmath>

namespace sfa::arch {

namespace {

// Integer-activation contract: a deterministic sample of each firing result
// is checked on every forward.
void check_integer_sample(const Tensor& s_int, int d_cap) {
    const std::int64_t n = std::min<std::int64_t>(s_int.numel(), 64);
    for (std::int64_t i = 0; i < n; ++i) {
        const Real v = s_int.data()[static_cast<std::size_t>(i)];
        if (v != std::floor(v) || v < Real(0) || v > static_cast<Real>(d_cap))
            throw std::logic_error("spiking activation left the integer range [0,D]");
    }
}

// BN over token channels: [N, L, C] viewed as [N, C, L, 1] so the optional
// per-token active map applies.
Tensor token_bn(BatchNormLayer& bn, const Tensor& tok, bool training,
                const std::vector<std::uint8_t>* active) {
    const int L = tok.dim(1);
    Tensor x4 = tokens_to_nchw(tok, L, 1);
    Tensor y = batchnorm2d(x4, bn.gamma, bn.beta, bn.running_mean, bn.running_var, training,
                           bn.momentum, bn.eps, active);
    return nchw_to_tokens(y);
}

Tensor linear_tokens(const LinearLayer& lin, const Tensor& tok) {
    const int N = tok.dim(0), L = tok.dim(1), C = tok.dim(2);
    Tensor flat = reshape(tok, {N * L, C});
    Tensor y = lin.forward(flat);
    return reshape(y, {N, L, y.dim(1)});
}

}  // namespace

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

void BlockSpec::validate() const {
    if (channels < 1) throw ParameterError("BlockSpec: channels must be >= 1");
    if (kind == BlockKind::transformer_block) {
        if (heads < 1 || channels % heads != 0)
            throw ParameterError("BlockSpec: channels must divide evenly into heads");
        const double gc = gamma * channels;
        if (gamma < 1.0 || std::abs(gc - std::round(gc)) > 1e-9)
            throw ParameterError("BlockSpec: gamma*channels must be a positive integer");
    }
    if (mlp_ratio <= 0.0) throw ParameterError("BlockSpec: mlp_ratio must be positive");
}

void ModelSpec::validate() const {
    neuron.validate();
    if (stages.empty()) throw ParameterError("ModelSpec: at least one stage required");
    if (in_channels < 1 || in_size < 4) throw ParameterError("ModelSpec: bad input shape");
    if (num_classes < 2) throw ParameterError("ModelSpec: need at least two classes");
    int size = in_size;
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const auto& st = stages[i];
        if (st.blocks < 1) throw ParameterError("ModelSpec: stage needs at least one block");
        if (i > 0) {
            if (size % 2 != 0) throw ParameterError("ModelSpec: resolution not divisible for downsample");
            size /= 2;  // resolutions strictly decrease through downsamples
        }
        if (size < 1) throw ParameterError("ModelSpec: resolution collapsed to zero");
        BlockSpec bs;
        bs.kind = st.kind;
        bs.channels = st.channels;
        bs.heads = heads;
        bs.gamma = gamma;
        bs.mlp_ratio = mlp_ratio;
        bs.validate();
    }
}

int ModelSpec::final_size() const {
    int size = in_size;
    for (std::size_t i = 1; i < stages.size(); ++i) size /= 2;
    return size;
}

// ---------------------------------------------------------------------------
// Spiking neuron layer
// ---------------------------------------------------------------------------

SpikeOut SpikeNeuronLayer::forward(const Tensor& u_in) {
    Tensor u = u_in;
    if (stateful && h_state.defined())
        u = add(u_in, scale(h_state, static_cast<Real>(cfg.beta)));
    Tensor normalized = theta == 1.0 ? u : scale(u, static_cast<Real>(1.0 / theta));
    Tensor s_int = fire_d(normalized, cfg.d_cap);
    check_integer_sample(s_int, cfg.d_cap);
    Tensor rate = scale(s_int, static_cast<Real>(1.0 / cfg.d_cap));
    if (stateful) {
        switch (cfg.reset_mode) {
            case ResetMode::none:
                h_state = u;
                break;
            case ResetMode::soft:
                h_state = sub(u, scale(s_int, static_cast<Real>(theta)));
                break;
            case ResetMode::hard: {
                // Reset gate treated as a constant (detached) indicator.
                Tensor keep(u.shape());
                Tensor reset_to(u.shape());
                for (std::int64_t i = 0; i < u.numel(); ++i) {
                    const bool fired = s_int.data()[static_cast<std::size_t>(i)] > Real(0);
                    keep.data()[static_cast<std::size_t>(i)] = fired ? Real(0) : Real(1);
                    reset_to.data()[static_cast<std::size_t>(i)] =
                        fired ? static_cast<Real>(cfg.v_reset) : Real(0);
                }
                h_state = add(mul(u, keep), reset_to);
                break;
            }
        }
    }
    return {rate, s_int};
}

// ---------------------------------------------------------------------------
// SpikeSepConv
// ---------------------------------------------------------------------------

SpikeSepConv::SpikeSepConv(int channels, const NeuronConfig& cfg, std::mt19937& rng)
    : sn1(cfg, cfg.v_th),
      sn2(cfg, cfg.v_th),
      sn3(cfg, cfg.v_th),
      pw1(channels, channels, 1, 1, 0, 1, rng),
      dw(channels, channels, 3, 1, 1, channels, rng),
      pw2(channels, channels, 1, 1, 0, 1, rng),
      bn1(channels),
      bn2(channels),
      bn3(channels) {}

Tensor SpikeSepConv::forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name) {
    const auto* map = ctx.map_for(u.dim(2), u.dim(3));
    Tensor s1 = sn1.forward(u).rate;
    Tensor x1 = bn1.forward(pw1.forward_masked(s1, map), ctx.training, map);
    Tensor s2 = sn2.forward(x1).rate;
    Tensor x2 = bn2.forward(dw.forward_masked(s2, map), ctx.training, map);
    Tensor s3 = sn3.forward(x2).rate;
    Tensor out = bn3.forward(pw2.forward_masked(s3, map), ctx.training, map);
    ctx.tap(name + ".out", out);
    return out;
}

// ---------------------------------------------------------------------------
// ChannelConv
// ---------------------------------------------------------------------------

ChannelConv::ChannelConv(int channels, double ratio, const NeuronConfig& cfg, std::mt19937& rng)
    : sn1(cfg, cfg.v_th),
      sn2(cfg, cfg.v_th),
      c1(channels, static_cast<int>(std::lround(channels * ratio)), 1, 1, 0, 1, rng),
      c2(static_cast<int>(std::lround(channels * ratio)), channels, 1, 1, 0, 1, rng),
      bn1(static_cast<int>(std::lround(channels * ratio))),
      bn2(channels) {}

Tensor ChannelConv::forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name) {
    const auto* map = ctx.map_for(u.dim(2), u.dim(3));
    Tensor s1 = sn1.forward(u).rate;
    Tensor x1 = bn1.forward(c1.forward_masked(s1, map), ctx.training, map);
    Tensor s2 = sn2.forward(x1).rate;
    Tensor out = bn2.forward(c2.forward_masked(s2, map), ctx.training, map);
    ctx.tap(name + ".out", out);
    return out;
}

// ---------------------------------------------------------------------------
// E-SDSA
// ---------------------------------------------------------------------------

double ESDSA::auto_theta(int tokens, int head_dim, int d_cap, double scale) {
    // Keeps typical Q(K^T V) values inside the firing range for moderate
    // firing rates (~1/4 of the cap).
    const double q = 0.25 * d_cap;
    const double typical = static_cast<double>(tokens) * head_dim * q * q * q * scale;
    return std::max(1.0, typical / (0.5 * d_cap));
}

ESDSA::ESDSA(int channels, int heads_, double gamma_, double attn_theta, const NeuronConfig& cfg,
             std::mt19937& rng)
    : heads(heads_), gamma(gamma_) {
    const int cv = static_cast<int>(std::lround(gamma_ * channels));
    scale = 1.0 / std::sqrt(static_cast<double>(channels) / heads_);
    sn_in = SpikeNeuronLayer(cfg, cfg.v_th);
    sn_q = SpikeNeuronLayer(cfg, cfg.v_th);
    sn_k = SpikeNeuronLayer(cfg, cfg.v_th);
    sn_v = SpikeNeuronLayer(cfg, cfg.v_th);
    sn_attn = SpikeNeuronLayer(cfg, attn_theta);  // scale folds into this threshold at export
    lin_q = LinearLayer(channels, channels, rng);
    lin_k = LinearLayer(channels, channels, rng);
    lin_v = LinearLayer(channels, cv, rng);
    lin_out = LinearLayer(cv, channels, rng);
    bn_q = BatchNormLayer(channels);
    bn_k = BatchNormLayer(channels);
    bn_v = BatchNormLayer(cv);
    bn_out = BatchNormLayer(channels);
}

Tensor ESDSA::forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name) {
    const int N = u.dim(0), H = u.dim(2), W = u.dim(3);
    const int L = H * W;
    const auto* map = ctx.map_for(H, W);

    Tensor s0 = sn_in.forward(u).rate;
    Tensor tok = nchw_to_tokens(s0);  // [N, L, C]

    Tensor q_mem = token_bn(bn_q, linear_tokens(lin_q, tok), ctx.training, map);
    Tensor k_mem = token_bn(bn_k, linear_tokens(lin_k, tok), ctx.training, map);
    Tensor v_mem = token_bn(bn_v, linear_tokens(lin_v, tok), ctx.training, map);

    Tensor q_s = sn_q.forward(q_mem).integer;
    Tensor k_s = sn_k.forward(k_mem).integer;
    Tensor v_s = sn_v.forward(v_mem).integer;
    if (map) {
        q_s = mask_tokens(q_s, *map);
        k_s = mask_tokens(k_s, *map);
        v_s = mask_tokens(v_s, *map);
    }
    ctx.tap(name + ".q_s", q_s);
    ctx.tap(name + ".k_s", k_s);
    ctx.tap(name + ".v_s", v_s);

    Tensor qh = split_heads(q_s, heads);  // [N*h, L, Ch]
    Tensor kh = split_heads(k_s, heads);
    Tensor vh = split_heads(v_s, heads);  // [N*h, L, gamma*Ch]

    Tensor kv = bmm(kh, vh, /*trans_a=*/true);  // [N*h, Ch, gamma*Ch]
    Tensor qkv = bmm(qh, kv);                   // [N*h, L, gamma*Ch]
    ctx.tap(name + ".qkv", qkv);

    Tensor attn_rate = sn_attn.forward(sfa::scale(qkv, static_cast<Real>(scale))).rate;
    Tensor merged = merge_heads(attn_rate, heads);  // [N, L, gamma*C]

    Tensor out_tok = token_bn(bn_out, linear_tokens(lin_out, merged), ctx.training, map);
    ctx.tap(name + ".out", out_tok);
    return tokens_to_nchw(out_tok, H, W);
}

// ---------------------------------------------------------------------------
// ChannelMLP
// ---------------------------------------------------------------------------

ChannelMLP::ChannelMLP(int channels, double ratio, const NeuronConfig& cfg, std::mt19937& rng)
    : sn1(cfg, cfg.v_th),
      sn2(cfg, cfg.v_th),
      l1(channels, static_cast<int>(std::lround(channels * ratio)), rng),
      l2(static_cast<int>(std::lround(channels * ratio)), channels, rng),
      bn1(static_cast<int>(std::lround(channels * ratio))),
      bn2(channels) {}

Tensor ChannelMLP::forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name) {
    const int H = u.dim(2), W = u.dim(3);
    const auto* map = ctx.map_for(H, W);
    Tensor s1 = sn1.forward(u).rate;
    Tensor x1 = token_bn(bn1, linear_tokens(l1, nchw_to_tokens(s1)), ctx.training, map);
    Tensor s2 = sn2.forward(x1).rate;
    Tensor out = token_bn(bn2, linear_tokens(l2, s2), ctx.training, map);
    ctx.tap(name + ".out", out);
    return tokens_to_nchw(out, H, W);
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

ConvBlock::ConvBlock(const BlockSpec& spec, const NeuronConfig& cfg, std::mt19937& rng)
    : ssc(spec.channels, cfg, rng), mixer(spec.channels, spec.mlp_ratio, cfg, rng) {}

Tensor ConvBlock::forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name) {
    Tensor u1 = add(u, ssc.forward(u, ctx, name + ".ssc"));
    Tensor u2 = add(u1, mixer.forward(u1, ctx, name + ".mixer"));
    return u2;
}

TransformerBlock::TransformerBlock(const BlockSpec& spec, int tokens, double attn_theta,
                                   const NeuronConfig& cfg, std::mt19937& rng)
    : ssc(spec.channels, cfg, rng),
      attn(spec.channels, spec.heads, spec.gamma,
           attn_theta > 0.0
               ? attn_theta
               : ESDSA::auto_theta(tokens, spec.channels / spec.heads, cfg.d_cap,
                                   1.0 / std::sqrt(static_cast<double>(spec.channels) / spec.heads)),
           cfg, rng),
      mlp(spec.channels, spec.mlp_ratio, cfg, rng) {}

Tensor TransformerBlock::forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name) {
    Tensor u1 = use_pre_conv ? add(u, ssc.forward(u, ctx, name + ".ssc")) : u;
    Tensor u2 = add(u1, attn.forward(u1, ctx, name + ".attn"));
    Tensor u3 = add(u2, mlp.forward(u2, ctx, name + ".mlp"));
    return u3;
}

DownsampleBlock::DownsampleBlock(int in_c, int out_c, const NeuronConfig& cfg, std::mt19937& rng)
    : sn(cfg, cfg.v_th), conv(in_c, out_c, 3, 2, 1, 1, rng), bn(out_c) {}

Tensor DownsampleBlock::forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name) {
    const int Ho = (u.dim(2) + 2 * 1 - 3) / 2 + 1;
    const int Wo = (u.dim(3) + 2 * 1 - 3) / 2 + 1;
    const auto* map_out = ctx.map_for(Ho, Wo);
    Tensor s = sn.forward(u).rate;
    Tensor out = bn.forward(conv.forward_masked(s, map_out), ctx.training, map_out);
    ctx.tap(name + ".out", out);
    return out;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m;
    m.spec = spec;
    m.seed = seed;
    std::mt19937 rng(static_cast<std::uint32_t>(seed));

    m.stem = Conv2dLayer(spec.in_channels, spec.stages[0].channels, 3, 1, 1, 1, rng);
    m.stem_bn = BatchNormLayer(spec.stages[0].channels);

    int size = spec.in_size;
    int prev_c = spec.stages[0].channels;
    for (std::size_t i = 0; i < spec.stages.size(); ++i) {
        const auto& st = spec.stages[i];
        Stage stage;
        stage.channels = st.channels;
        if (i > 0) {
            stage.down = std::make_unique<DownsampleBlock>(prev_c, st.channels, spec.neuron, rng);
            size /= 2;
        }
        stage.resolution = size;
        BlockSpec bs;
        bs.kind = st.kind;
        bs.channels = st.channels;
        bs.heads = spec.heads;
        bs.gamma = spec.gamma;
        bs.mlp_ratio = spec.mlp_ratio;
        for (int b = 0; b < st.blocks; ++b) {
            Block blk;
            blk.kind = st.kind;
            if (st.kind == BlockKind::conv_block)
                blk.conv = std::make_unique<ConvBlock>(bs, spec.neuron, rng);
            else
                blk.xform = std::make_unique<TransformerBlock>(bs, size * size, spec.attn_theta,
                                                               spec.neuron, rng);
            stage.blocks.push_back(std::move(blk));
        }
        m.stages.push_back(std::move(stage));
        prev_c = st.channels;
    }
    m.head_sn = SpikeNeuronLayer(spec.neuron, spec.neuron.v_th);
    m.head = LinearLayer(prev_c, spec.num_classes, rng);
    return m;
}

Tensor Model::forward_features(const Tensor& x, const ForwardCtx& ctx) {
    if (x.ndim() != 4 || x.dim(1) != spec.in_channels || x.dim(2) != spec.in_size ||
        x.dim(3) != spec.in_size)
        throw DimensionError("Model: input must be [N," + std::to_string(spec.in_channels) + "," +
                             std::to_string(spec.in_size) + "," + std::to_string(spec.in_size) + "]");
    const auto* stem_map = ctx.map_for(spec.in_size, spec.in_size);
    Tensor u = stem_bn.forward(stem.forward_masked(x, stem_map), ctx.training, stem_map);
    ctx.tap("stem.out", u);
    for (std::size_t i = 0; i < stages.size(); ++i) {
        auto& stage = stages[i];
        const std::string sname = "s" + std::to_string(i);
        if (stage.down) u = stage.down->forward(u, ctx, sname + ".down");
        for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
            const std::string bname = sname + ".b" + std::to_string(b);
            auto& blk = stage.blocks[b];
            u = blk.kind == BlockKind::conv_block ? blk.conv->forward(u, ctx, bname)
                                                  : blk.xform->forward(u, ctx, bname);
            ctx.tap(bname + ".u", u);
        }
    }
    return u;
}

Tensor Model::forward(const Tensor& x, const ForwardCtx& ctx) {
    Tensor feats = forward_features(x, ctx);
    Tensor s = head_sn.forward(feats).rate;
    ctx.tap("head.spikes", s);
    Tensor pooled = global_avg_pool(s);
    return head.forward(pooled);
}

void Model::begin_sequence() {
    auto reset = [](SpikeNeuronLayer& sn) { sn.begin_sequence(); };
    auto reset_ssc = [&](SpikeSepConv& s) {
        reset(s.sn1);
        reset(s.sn2);
        reset(s.sn3);
    };
    for (auto& stage : stages) {
        if (stage.down) reset(stage.down->sn);
        for (auto& blk : stage.blocks) {
            if (blk.conv) {
                reset_ssc(blk.conv->ssc);
                reset(blk.conv->mixer.sn1);
                reset(blk.conv->mixer.sn2);
            } else if (blk.xform) {
                reset_ssc(blk.xform->ssc);
                auto& a = blk.xform->attn;
                reset(a.sn_in);
                reset(a.sn_q);
                reset(a.sn_k);
                reset(a.sn_v);
                reset(a.sn_attn);
                reset(blk.xform->mlp.sn1);
                reset(blk.xform->mlp.sn2);
            }
        }
    }
    reset(head_sn);
}

namespace {

void collect_conv(const std::string& name, Conv2dLayer& c,
                  std::vector<std::pair<std::string, Tensor>>& out) {
    out.emplace_back(name + ".w", c.w);
    out.emplace_back(name + ".b", c.b);
}

void collect_linear(const std::string& name, LinearLayer& l,
                    std::vector<std::pair<std::string, Tensor>>& out) {
    out.emplace_back(name + ".w", l.w);
    out.emplace_back(name + ".b", l.b);
}

void collect_bn(const std::string& name, BatchNormLayer& bn,
                std::vector<std::pair<std::string, Tensor>>& out) {
    out.emplace_back(name + ".gamma", bn.gamma);
    out.emplace_back(name + ".beta", bn.beta);
}

void collect_ssc(const std::string& name, SpikeSepConv& s,
                 std::vector<std::pair<std::string, Tensor>>& out) {
    collect_conv(name + ".pw1", s.pw1, out);
    collect_bn(name + ".bn1", s.bn1, out);
    collect_conv(name + ".dw", s.dw, out);
    collect_bn(name + ".bn2", s.bn2, out);
    collect_conv(name + ".pw2", s.pw2, out);
    collect_bn(name + ".bn3", s.bn3, out);
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() {
    std::vector<std::pair<std::string, Tensor>> out;
    collect_conv("stem", stem, out);
    collect_bn("stem.bn", stem_bn, out);
    for (std::size_t i = 0; i < stages.size(); ++i) {
        auto& stage = stages[i];
        const std::string sname = "s" + std::to_string(i);
        if (stage.down) {
            collect_conv(sname + ".down", stage.down->conv, out);
            collect_bn(sname + ".down.bn", stage.down->bn, out);
        }
        for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
            const std::string bname = sname + ".b" + std::to_string(b);
            auto& blk = stage.blocks[b];
            if (blk.conv) {
                collect_ssc(bname + ".ssc", blk.conv->ssc, out);
                collect_conv(bname + ".mixer.c1", blk.conv->mixer.c1, out);
                collect_bn(bname + ".mixer.bn1", blk.conv->mixer.bn1, out);
                collect_conv(bname + ".mixer.c2", blk.conv->mixer.c2, out);
                collect_bn(bname + ".mixer.bn2", blk.conv->mixer.bn2, out);
            } else if (blk.xform) {
                collect_ssc(bname + ".ssc", blk.xform->ssc, out);
                auto& a = blk.xform->attn;
                collect_linear(bname + ".attn.q", a.lin_q, out);
                collect_bn(bname + ".attn.bn_q", a.bn_q, out);
                collect_linear(bname + ".attn.k", a.lin_k, out);
                collect_bn(bname + ".attn.bn_k", a.bn_k, out);
                collect_linear(bname + ".attn.v", a.lin_v, out);
                collect_bn(bname + ".attn.bn_v", a.bn_v, out);
                collect_linear(bname + ".attn.out", a.lin_out, out);
                collect_bn(bname + ".attn.bn_out", a.bn_out, out);
                collect_linear(bname + ".mlp.l1", blk.xform->mlp.l1, out);
                collect_bn(bname + ".mlp.bn1", blk.xform->mlp.bn1, out);
                collect_linear(bname + ".mlp.l2", blk.xform->mlp.l2, out);
                collect_bn(bname + ".mlp.bn2", blk.xform->mlp.bn2, out);
            }
        }
    }
    collect_linear("head", head, out);
    return out;
}

std::vector<Tensor> Model::parameters() {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

namespace {

void collect_bn_buffers(const std::string& name, BatchNormLayer& bn,
                        std::vector<std::pair<std::string, std::vector<Real>*>>& out) {
    out.emplace_back(name + ".running_mean", &bn.running_mean);
    out.emplace_back(name + ".running_var", &bn.running_var);
}

}  // namespace

std::vector<std::pair<std::string, std::vector<Real>*>> Model::named_buffers() {
    std::vector<std::pair<std::string, std::vector<Real>*>> out;
    collect_bn_buffers("stem.bn", stem_bn, out);
    for (std::size_t i = 0; i < stages.size(); ++i) {
        auto& stage = stages[i];
        const std::string sname = "s" + std::to_string(i);
        if (stage.down) collect_bn_buffers(sname + ".down.bn", stage.down->bn, out);
        for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
            const std::string bname = sname + ".b" + std::to_string(b);
            auto& blk = stage.blocks[b];
            if (blk.conv) {
                collect_bn_buffers(bname + ".ssc.bn1", blk.conv->ssc.bn1, out);
                collect_bn_buffers(bname + ".ssc.bn2", blk.conv->ssc.bn2, out);
                collect_bn_buffers(bname + ".ssc.bn3", blk.conv->ssc.bn3, out);
                collect_bn_buffers(bname + ".mixer.bn1", blk.conv->mixer.bn1, out);
                collect_bn_buffers(bname + ".mixer.bn2", blk.conv->mixer.bn2, out);
            } else if (blk.xform) {
                collect_bn_buffers(bname + ".ssc.bn1", blk.xform->ssc.bn1, out);
                collect_bn_buffers(bname + ".ssc.bn2", blk.xform->ssc.bn2, out);
                collect_bn_buffers(bname + ".ssc.bn3", blk.xform->ssc.bn3, out);
                collect_bn_buffers(bname + ".attn.bn_q", blk.xform->attn.bn_q, out);
                collect_bn_buffers(bname + ".attn.bn_k", blk.xform->attn.bn_k, out);
                collect_bn_buffers(bname + ".attn.bn_v", blk.xform->attn.bn_v, out);
                collect_bn_buffers(bname + ".attn.bn_out", blk.xform->attn.bn_out, out);
                collect_bn_buffers(bname + ".mlp.bn1", blk.xform->mlp.bn1, out);
                collect_bn_buffers(bname + ".mlp.bn2", blk.xform->mlp.bn2, out);
            }
        }
    }
    return out;
}

std::int64_t Model::param_count() {
    std::int64_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.numel();
    return n;
}

}  // namespace sfa::arch
