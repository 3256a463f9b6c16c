#pragma once

// E-SpikeFormer building blocks at desk scale: spiking separable convolution,
// channel mixers, efficient spike-driven self-attention, and model assembly.
// Residual connections add membrane potentials, never spike tensors.

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "sfa/neuron.hpp"
#include "sfa/nn.hpp"
#include "sfa/sparsity.hpp"

namespace sfa::arch {

enum class BlockKind { conv_block, transformer_block, downsample };

struct BlockSpec {
    BlockKind kind = BlockKind::conv_block;
    int channels = 32;
    int heads = 1;           // transformer only
    double gamma = 2.0;      // V channel expansion factor, >= 1
    double mlp_ratio = 2.0;

    void validate() const;
};

struct StageSpec {
    BlockKind kind = BlockKind::conv_block;  // conv_block or transformer_block
    int channels = 32;
    int blocks = 1;
};

struct ModelSpec {
    int in_channels = 1;
    int in_size = 16;  // square input
    int num_classes = 3;
    std::vector<StageSpec> stages;
    int heads = 4;
    double gamma = 2.0;
    double mlp_ratio = 2.0;
    double attn_theta = 0.0;  // attention neuron threshold; 0 selects the auto rule
    NeuronConfig neuron;

    void validate() const;
    int downsample_levels() const { return static_cast<int>(stages.size()); }
    int final_size() const;
};

// Per-forward options. `sparsity` switches convolutions to sparse (masked)
// mode; `taps` collects named layer outputs for diagnostics.
struct ForwardCtx {
    bool training = true;
    const mim::SparsityPyramid* sparsity = nullptr;
    std::vector<std::pair<std::string, Tensor>>* taps = nullptr;

    const std::vector<std::uint8_t>* map_for(int h, int w) const {
        return sparsity ? sparsity->at(h, w) : nullptr;
    }
    void tap(const std::string& name, const Tensor& t) const {
        if (taps) taps->emplace_back(name, t);
    }
};

struct SpikeOut {
    Tensor rate;     // integer / D, the forward signal
    Tensor integer;  // raw integer activation in [0, D]
};

// Integer-activation spiking neuron layer with optional carried membrane
// state for multi-timestep runs.
struct SpikeNeuronLayer {
    NeuronConfig cfg;
    double theta = 1.0;   // per-layer firing threshold
    bool stateful = false;
    Tensor h_state;       // graph-connected within a sequence

    SpikeNeuronLayer() = default;
    SpikeNeuronLayer(const NeuronConfig& c, double theta_)
        : cfg(c), theta(theta_), stateful(c.t_steps > 1) {}

    void begin_sequence() { h_state = Tensor(); }
    SpikeOut forward(const Tensor& u_in);
};

// Token mixer: pw conv, dw conv, pw conv with BN after each conv and a
// spiking neuron ahead of each conv.
struct SpikeSepConv {
    SpikeNeuronLayer sn1, sn2, sn3;
    Conv2dLayer pw1, dw, pw2;
    BatchNormLayer bn1, bn2, bn3;

    SpikeSepConv() = default;
    SpikeSepConv(int channels, const NeuronConfig& cfg, std::mt19937& rng);
    Tensor forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name);
};

// Channel mixer for conv blocks: two 1x1 convs around an expansion.
struct ChannelConv {
    SpikeNeuronLayer sn1, sn2;
    Conv2dLayer c1, c2;
    BatchNormLayer bn1, bn2;

    ChannelConv() = default;
    ChannelConv(int channels, double ratio, const NeuronConfig& cfg, std::mt19937& rng);
    Tensor forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name);
};

// Efficient spike-driven self-attention on token layout. Products are
// computed on integer activations; K^T V is associated first.
struct ESDSA {
    int heads = 1;
    double gamma = 2.0;
    double scale = 1.0;
    SpikeNeuronLayer sn_in, sn_q, sn_k, sn_v, sn_attn;
    LinearLayer lin_q, lin_k, lin_v, lin_out;
    BatchNormLayer bn_q, bn_k, bn_v, bn_out;

    ESDSA() = default;
    ESDSA(int channels, int heads_, double gamma_, double attn_theta, const NeuronConfig& cfg,
          std::mt19937& rng);
    Tensor forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name);

    static double auto_theta(int tokens, int head_dim, int d_cap, double scale);
};

// Channel MLP on tokens: Linear(SN(Linear(SN(.)))) with BN after each linear.
struct ChannelMLP {
    SpikeNeuronLayer sn1, sn2;
    LinearLayer l1, l2;
    BatchNormLayer bn1, bn2;

    ChannelMLP() = default;
    ChannelMLP(int channels, double ratio, const NeuronConfig& cfg, std::mt19937& rng);
    Tensor forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name);
};

struct ConvBlock {
    SpikeSepConv ssc;
    ChannelConv mixer;

    ConvBlock() = default;
    ConvBlock(const BlockSpec& spec, const NeuronConfig& cfg, std::mt19937& rng);
    Tensor forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name);
};

struct TransformerBlock {
    bool use_pre_conv = true;  // ablation hook for the leading SpikeSepConv
    SpikeSepConv ssc;
    ESDSA attn;
    ChannelMLP mlp;

    TransformerBlock() = default;
    TransformerBlock(const BlockSpec& spec, int tokens, double attn_theta, const NeuronConfig& cfg,
                     std::mt19937& rng);
    Tensor forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name);
};

struct DownsampleBlock {
    SpikeNeuronLayer sn;
    Conv2dLayer conv;  // 3x3, stride 2
    BatchNormLayer bn;

    DownsampleBlock() = default;
    DownsampleBlock(int in_c, int out_c, const NeuronConfig& cfg, std::mt19937& rng);
    Tensor forward(const Tensor& u, const ForwardCtx& ctx, const std::string& name);
};

struct Block {
    BlockKind kind;
    std::unique_ptr<ConvBlock> conv;
    std::unique_ptr<TransformerBlock> xform;
};

struct Stage {
    std::unique_ptr<DownsampleBlock> down;  // absent for the first stage
    std::vector<Block> blocks;
    int channels = 0;
    int resolution = 0;
};

class Model {
public:
    ModelSpec spec;
    std::uint64_t seed = 0;

    Conv2dLayer stem;
    BatchNormLayer stem_bn;
    std::vector<Stage> stages;
    SpikeNeuronLayer head_sn;
    LinearLayer head;

    // Membrane features after the last stage, [N, C, H', W'].
    Tensor forward_features(const Tensor& x, const ForwardCtx& ctx);
    // Class logits [N, num_classes].
    Tensor forward(const Tensor& x, const ForwardCtx& ctx);

    void begin_sequence();
    std::vector<std::pair<std::string, Tensor>> named_parameters();
    // Non-learnable state (batch-norm running statistics), for persistence.
    std::vector<std::pair<std::string, std::vector<Real>*>> named_buffers();
    std::vector<Tensor> parameters();
    std::int64_t param_count();
    int feature_channels() const { return stages.empty() ? 0 : stages.back().channels; }
};

Model build_model(const ModelSpec& spec, std::uint64_t seed);

}  // namespace sfa::arch
