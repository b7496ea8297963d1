// model.hpp - the kv-to-CT converter network.
//
// A two-channel 2D image (the two orthogonal kV views) is patch-embedded into
// a token grid, runs through a hierarchical encoder (pre-LN transformer
// blocks with window attention, patch merging after each stage), a mirrored
// decoder (patch unmerging), and a final per-token linear head that emits a
// q*q*D voxel block per token, assembled into a 3D volume in (R-L, A-P, S-I)
// order. Scalar type is templated: float for training, double for gradient
// checks.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kv2ct/common.hpp"
#include "kv2ct/geometry.hpp"
#include "kv2ct/volume.hpp"

namespace kv2ct {

template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> v;

    void resize(std::vector<int> s) {
        shape = std::move(s);
        std::int64_t n = 1;
        for (int d : shape) n *= d;
        v.assign(std::size_t(n), T(0));
    }
    std::int64_t size() const { return std::int64_t(v.size()); }
    T* data() { return v.data(); }
    const T* data() const { return v.data(); }
};

// Shape of one transformer stage (blocks run at this geometry).
struct StageShape {
    int grid_r = 0, grid_c = 0;  // token grid (rows = S-I, cols = A-P/u)
    int dim = 0;
    int heads = 0;
    int depth = 0;
    int hidden = 0;  // MLP width
    int tokens() const { return grid_r * grid_c; }
};

struct ModelConfig {
    std::array<int, 2> input_hw{40, 40};  // (H rows = v, W cols = u)
    int in_channels = 2;
    int patch_size = 2;
    int embed_dim = 48;
    std::vector<int> encoder_depths{2, 2};
    std::vector<int> decoder_depths{2, 2};
    std::vector<int> encoder_heads{4, 4};
    std::vector<int> decoder_heads{4, 4};
    int window_size = 5;
    double mlp_ratio = 4.0;
    int out_depth = 32;  // D: output voxels along R-L per token
    int out_patch = 1;   // q: output (A-P, S-I) block side per token
    bool use_pos_embed = true;
    std::string model_tag = "primary";
    // Affine normalizations (stored in checkpoints): hu_norm = (hu-c)/s.
    double hu_center = 100.0, hu_scale = 1100.0;
    double kv_center = 2.0, kv_scale = 2.0;

    void validate() const;
    int stages() const { return int(encoder_depths.size()); }
    std::vector<StageShape> encoder_stages() const;
    std::vector<StageShape> decoder_stages() const;
    // Grid after the full encoder/decoder round trip (equals the input grid).
    std::array<int, 2> final_grid() const {
        return {input_hw[0] / patch_size, input_hw[1] / patch_size};
    }
    std::array<int, 3> output_dims() const {
        const auto g = final_grid();
        return {out_depth, g[1] * out_patch, g[0] * out_patch};
    }
    std::int64_t input_size() const {
        return std::int64_t(in_channels) * input_hw[0] * input_hw[1];
    }
    std::int64_t output_size() const {
        const auto d = output_dims();
        return std::int64_t(d[0]) * d[1] * d[2];
    }
    std::int64_t param_count() const;  // closed form
    static int mlp_hidden(int dim, double ratio) {
        return std::max(1, int(std::lround(ratio * dim)));
    }
};

template <typename T>
struct AttnParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct BlockParams {
    Tensor<T> ln1_g, ln1_b;
    AttnParams<T> attn;
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> w1, b1, w2, b2;  // MLP
};

template <typename T>
struct StageParams {
    std::vector<BlockParams<T>> blocks;
    Tensor<T> trans_w, trans_b;  // merge (encoder) or unmerge (decoder)
};

template <typename T>
struct ModelParams {
    Tensor<T> patch_w, patch_b, pos_embed;
    std::vector<StageParams<T>> enc, dec;
    Tensor<T> final_ln_g, final_ln_b, head_w, head_b;
};

// Named tensor list in the canonical (checkpoint/manifest) order.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> tensor_list(ModelParams<T>& p);

// ---- standalone operations (shared by the network and the tests) ----

// Patchify + linear embed + optional learned position embedding.
// img layout: [channel][row][col] flattened; returns tokens [N, d].
template <typename T>
std::vector<T> patch_embed_forward(const ModelConfig& cfg, const Tensor<T>& w,
                                   const Tensor<T>& b, const Tensor<T>& pos,
                                   const std::vector<T>& img);

// Window multi-head attention over an r x c token grid (no residual, no LN).
template <typename T>
std::vector<T> w_mha_forward(int rows, int cols, int dim, int heads, int window,
                             const AttnParams<T>& p, const std::vector<T>& tokens);

// 2x2 patch merge: grid halves, dim doubles. x is [r*c, dim].
template <typename T>
std::vector<T> merge_forward(int rows, int cols, int dim, const Tensor<T>& w,
                             const Tensor<T>& b, const std::vector<T>& x);

// Inverse: grid doubles, dim halves.
template <typename T>
std::vector<T> unmerge_forward(int rows, int cols, int dim, const Tensor<T>& w,
                               const Tensor<T>& b, const std::vector<T>& x);

// ---- the full network ----

namespace detail {

template <typename T>
struct LnCache {
    std::vector<T> xhat, invstd;
};

template <typename T>
struct BlockCache {
    LnCache<T> ln1, ln2;
    std::vector<T> q, k, v;       // [N, d]
    std::vector<T> attn;          // window/head attention probabilities
    std::vector<T> ctx;           // [N, d] concatenated head outputs
    std::vector<T> h_pre, h_act;  // [N, hidden]
};

template <typename T>
struct StageCache {
    std::vector<BlockCache<T>> blocks;
    std::vector<T> gathered;  // merge input, [N/4, 4d] (encoder stages)
    std::vector<T> trans_in;  // unmerge input, [N, d] (decoder stages)
};

}  // namespace detail

template <typename T>
class Net {
  public:
    explicit Net(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    ModelParams<T>& params() { return params_; }
    const ModelParams<T>& params() const { return params_; }
    ModelParams<T>& grads() { return grads_; }

    // Truncated-normal projection weights (sigma 0.02), zero biases, unit LN.
    void init_params(std::uint64_t seed);
    void zero_grad();

    // input: normalized [in_channels * H * W]; returns normalized output
    // [D * n_ap * n_si] (view into an internal buffer, valid until the next
    // forward).
    const std::vector<T>& forward(const std::vector<T>& input);
    // dout: gradient of the loss w.r.t. the forward output; accumulates into
    // grads(). Must follow the matching forward.
    void backward(const std::vector<T>& dout);

    std::int64_t param_count_allocated();

  private:
    void block_forward(std::vector<T>& x, const StageShape& s, BlockParams<T>& p,
                       detail::BlockCache<T>& c);
    void block_backward(std::vector<T>& dx, const StageShape& s, BlockParams<T>& p,
                        BlockParams<T>& g, detail::BlockCache<T>& c);

    ModelConfig cfg_;
    ModelParams<T> params_, grads_;
    // caches
    std::vector<T> patches_;  // [N0, p*p*in_ch]
    std::vector<detail::StageCache<T>> enc_cache_, dec_cache_;
    detail::LnCache<T> final_ln_;
    std::vector<T> head_in_;  // final LN output
    std::vector<T> out_;
    std::vector<T> xbuf_, tbuf_;  // activation ping-pong buffers
    bool have_forward_ = false;
};

// ---- normalization + packing helpers ----

template <typename T>
std::vector<T> pack_kv_input(const ModelConfig& cfg, const Image2D& ap, const Image2D& lat);

template <typename T>
std::vector<T> pack_ct_target(const ModelConfig& cfg, const Volume3D& vol);

struct VolumeMeta {
    std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
    std::array<double, 3> origin_mm{0.0, 0.0, 0.0};
};

template <typename T>
Volume3D unpack_output(const ModelConfig& cfg, const std::vector<T>& out, const VolumeMeta& meta);

// ---- checkpoints: <stem>.json (config + manifest) + <stem>.bin (f32) ----

template <typename T>
void save_checkpoint(Net<T>& net, const std::string& stem);

template <typename T>
Net<T> load_checkpoint(const std::string& stem);

void model_config_to_json_file(const ModelConfig& cfg, const std::string& path);

extern template class Net<float>;
extern template class Net<double>;

}  // namespace kv2ct
