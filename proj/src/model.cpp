#include "kv2ct/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "json.hpp"
#include "kv2ct/tensor.hpp"

namespace kv2ct {

using nlohmann::json;

// ---- config ----

void ModelConfig::validate() const {
    if (input_hw[0] <= 0 || input_hw[1] <= 0) throw ConfigError("model: input size must be positive");
    if (in_channels <= 0) throw ConfigError("model: in_channels must be positive");
    if (patch_size <= 0) throw ConfigError("model: patch size must be positive");
    if (input_hw[0] % patch_size != 0 || input_hw[1] % patch_size != 0)
        throw ConfigError("model: input " + std::to_string(input_hw[0]) + "x" +
                          std::to_string(input_hw[1]) + " not divisible by patch size " +
                          std::to_string(patch_size));
    if (embed_dim <= 0) throw ConfigError("model: embed_dim must be positive");
    if (encoder_depths.empty()) throw ConfigError("model: at least one stage required");
    if (decoder_depths.size() != encoder_depths.size())
        throw ConfigError("model: encoder and decoder stage counts differ");
    if (encoder_heads.size() != encoder_depths.size() ||
        decoder_heads.size() != decoder_depths.size())
        throw ConfigError("model: heads list length must match stage count");
    for (int v : encoder_depths)
        if (v <= 0) throw ConfigError("model: encoder depth must be positive");
    for (int v : decoder_depths)
        if (v <= 0) throw ConfigError("model: decoder depth must be positive");
    if (window_size <= 0) throw ConfigError("model: window size must be positive");
    if (mlp_ratio <= 0) throw ConfigError("model: mlp_ratio must be positive");
    if (out_depth <= 0 || out_patch <= 0)
        throw ConfigError("model: output block dims must be positive");
    if (model_tag.empty()) throw ConfigError("model: model_tag must not be empty");
    if (hu_scale == 0 || kv_scale == 0) throw ConfigError("model: normalization scale is zero");

    const int S = stages();
    int gr = input_hw[0] / patch_size, gc = input_hw[1] / patch_size;
    for (int s = 0; s < S; ++s) {
        const int dim = embed_dim << s;
        if (encoder_heads[s] <= 0 || dim % encoder_heads[s] != 0)
            throw ConfigError("model: encoder stage " + std::to_string(s) + " dim " +
                              std::to_string(dim) + " not divisible by heads " +
                              std::to_string(encoder_heads[s]));
        if (gr % window_size != 0 || gc % window_size != 0)
            throw ConfigError("model: encoder stage " + std::to_string(s) + " grid " +
                              std::to_string(gr) + "x" + std::to_string(gc) +
                              " not divisible by window " + std::to_string(window_size));
        if (gr % 2 != 0 || gc % 2 != 0)
            throw ConfigError("model: encoder stage " + std::to_string(s) + " grid " +
                              std::to_string(gr) + "x" + std::to_string(gc) +
                              " must be even for patch merge");
        gr /= 2;
        gc /= 2;
    }
    for (int i = 0; i < S; ++i) {
        const int dim = embed_dim << (S - i);
        if (decoder_heads[i] <= 0 || dim % decoder_heads[i] != 0)
            throw ConfigError("model: decoder stage " + std::to_string(i) + " dim " +
                              std::to_string(dim) + " not divisible by heads " +
                              std::to_string(decoder_heads[i]));
        if (gr % window_size != 0 || gc % window_size != 0)
            throw ConfigError("model: decoder stage " + std::to_string(i) + " grid " +
                              std::to_string(gr) + "x" + std::to_string(gc) +
                              " not divisible by window " + std::to_string(window_size));
        gr *= 2;
        gc *= 2;
    }
}

std::vector<StageShape> ModelConfig::encoder_stages() const {
    std::vector<StageShape> out;
    int gr = input_hw[0] / patch_size, gc = input_hw[1] / patch_size;
    for (int s = 0; s < stages(); ++s) {
        StageShape ss;
        ss.grid_r = gr;
        ss.grid_c = gc;
        ss.dim = embed_dim << s;
        ss.heads = encoder_heads[s];
        ss.depth = encoder_depths[s];
        ss.hidden = mlp_hidden(ss.dim, mlp_ratio);
        out.push_back(ss);
        gr /= 2;
        gc /= 2;
    }
    return out;
}

std::vector<StageShape> ModelConfig::decoder_stages() const {
    std::vector<StageShape> out;
    const int S = stages();
    int gr = (input_hw[0] / patch_size) >> S, gc = (input_hw[1] / patch_size) >> S;
    for (int i = 0; i < S; ++i) {
        StageShape ss;
        ss.grid_r = gr;
        ss.grid_c = gc;
        ss.dim = embed_dim << (S - i);
        ss.heads = decoder_heads[i];
        ss.depth = decoder_depths[i];
        ss.hidden = mlp_hidden(ss.dim, mlp_ratio);
        out.push_back(ss);
        gr *= 2;
        gc *= 2;
    }
    return out;
}

namespace {

std::int64_t block_params(int dim, int hidden) {
    const std::int64_t d = dim, h = hidden;
    const std::int64_t ln = 2 * d;
    const std::int64_t qkv = 3 * (d * d + d);
    const std::int64_t proj = d * d + d;
    const std::int64_t mlp = d * h + h + h * d + d;
    return 2 * ln + qkv + proj + mlp;
}

}  // namespace

std::int64_t ModelConfig::param_count() const {
    validate();
    const std::int64_t in_vec = std::int64_t(in_channels) * patch_size * patch_size;
    const std::int64_t n0 = std::int64_t(input_hw[0] / patch_size) * (input_hw[1] / patch_size);
    std::int64_t total = embed_dim * in_vec + embed_dim;
    if (use_pos_embed) total += n0 * embed_dim;
    for (const auto& s : encoder_stages()) {
        total += std::int64_t(s.depth) * block_params(s.dim, s.hidden);
        total += std::int64_t(2 * s.dim) * (4 * s.dim) + 2 * s.dim;  // merge
    }
    for (const auto& s : decoder_stages()) {
        total += std::int64_t(s.depth) * block_params(s.dim, s.hidden);
        total += std::int64_t(2 * s.dim) * s.dim + 2 * s.dim;  // unmerge
    }
    const std::int64_t out_vec = std::int64_t(out_patch) * out_patch * out_depth;
    total += 2 * embed_dim;                 // final LN
    total += out_vec * embed_dim + out_vec; // head
    return total;
}

// ---- parameter tree ----

namespace {

template <typename T>
void alloc_params(const ModelConfig& cfg, ModelParams<T>& p) {
    const int d = cfg.embed_dim;
    const int in_vec = cfg.in_channels * cfg.patch_size * cfg.patch_size;
    const int n0 = (cfg.input_hw[0] / cfg.patch_size) * (cfg.input_hw[1] / cfg.patch_size);
    p.patch_w.resize({d, in_vec});
    p.patch_b.resize({d});
    if (cfg.use_pos_embed)
        p.pos_embed.resize({n0, d});
    else
        p.pos_embed.resize({0});
    auto alloc_block = [](BlockParams<T>& b, int dim, int hidden) {
        b.ln1_g.resize({dim});
        b.ln1_b.resize({dim});
        b.attn.wq.resize({dim, dim});
        b.attn.bq.resize({dim});
        b.attn.wk.resize({dim, dim});
        b.attn.bk.resize({dim});
        b.attn.wv.resize({dim, dim});
        b.attn.bv.resize({dim});
        b.attn.wo.resize({dim, dim});
        b.attn.bo.resize({dim});
        b.ln2_g.resize({dim});
        b.ln2_b.resize({dim});
        b.w1.resize({hidden, dim});
        b.b1.resize({hidden});
        b.w2.resize({dim, hidden});
        b.b2.resize({dim});
    };
    p.enc.resize(cfg.stages());
    const auto enc = cfg.encoder_stages();
    for (int s = 0; s < cfg.stages(); ++s) {
        p.enc[s].blocks.resize(enc[s].depth);
        for (auto& b : p.enc[s].blocks) alloc_block(b, enc[s].dim, enc[s].hidden);
        p.enc[s].trans_w.resize({2 * enc[s].dim, 4 * enc[s].dim});
        p.enc[s].trans_b.resize({2 * enc[s].dim});
    }
    p.dec.resize(cfg.stages());
    const auto dec = cfg.decoder_stages();
    for (int s = 0; s < cfg.stages(); ++s) {
        p.dec[s].blocks.resize(dec[s].depth);
        for (auto& b : p.dec[s].blocks) alloc_block(b, dec[s].dim, dec[s].hidden);
        p.dec[s].trans_w.resize({2 * dec[s].dim, dec[s].dim});
        p.dec[s].trans_b.resize({2 * dec[s].dim});
    }
    p.final_ln_g.resize({d});
    p.final_ln_b.resize({d});
    const int out_vec = cfg.out_patch * cfg.out_patch * cfg.out_depth;
    p.head_w.resize({out_vec, d});
    p.head_b.resize({out_vec});
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> tensor_list(ModelParams<T>& p) {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("patch_w", &p.patch_w);
    out.emplace_back("patch_b", &p.patch_b);
    if (p.pos_embed.size() > 0) out.emplace_back("pos_embed", &p.pos_embed);
    auto add_block = [&out](const std::string& prefix, BlockParams<T>& b) {
        out.emplace_back(prefix + ".ln1_g", &b.ln1_g);
        out.emplace_back(prefix + ".ln1_b", &b.ln1_b);
        out.emplace_back(prefix + ".wq", &b.attn.wq);
        out.emplace_back(prefix + ".bq", &b.attn.bq);
        out.emplace_back(prefix + ".wk", &b.attn.wk);
        out.emplace_back(prefix + ".bk", &b.attn.bk);
        out.emplace_back(prefix + ".wv", &b.attn.wv);
        out.emplace_back(prefix + ".bv", &b.attn.bv);
        out.emplace_back(prefix + ".wo", &b.attn.wo);
        out.emplace_back(prefix + ".bo", &b.attn.bo);
        out.emplace_back(prefix + ".ln2_g", &b.ln2_g);
        out.emplace_back(prefix + ".ln2_b", &b.ln2_b);
        out.emplace_back(prefix + ".w1", &b.w1);
        out.emplace_back(prefix + ".b1", &b.b1);
        out.emplace_back(prefix + ".w2", &b.w2);
        out.emplace_back(prefix + ".b2", &b.b2);
    };
    for (std::size_t s = 0; s < p.enc.size(); ++s) {
        const std::string sp = "enc" + std::to_string(s);
        for (std::size_t b = 0; b < p.enc[s].blocks.size(); ++b)
            add_block(sp + ".blk" + std::to_string(b), p.enc[s].blocks[b]);
        out.emplace_back(sp + ".merge_w", &p.enc[s].trans_w);
        out.emplace_back(sp + ".merge_b", &p.enc[s].trans_b);
    }
    for (std::size_t s = 0; s < p.dec.size(); ++s) {
        const std::string sp = "dec" + std::to_string(s);
        for (std::size_t b = 0; b < p.dec[s].blocks.size(); ++b)
            add_block(sp + ".blk" + std::to_string(b), p.dec[s].blocks[b]);
        out.emplace_back(sp + ".unmerge_w", &p.dec[s].trans_w);
        out.emplace_back(sp + ".unmerge_b", &p.dec[s].trans_b);
    }
    out.emplace_back("final_ln_g", &p.final_ln_g);
    out.emplace_back("final_ln_b", &p.final_ln_b);
    out.emplace_back("head_w", &p.head_w);
    out.emplace_back("head_b", &p.head_b);
    return out;
}

// ---- shared op internals ----

namespace {

template <typename T>
void patchify(const ModelConfig& cfg, const T* img, T* patches) {
    const int H = cfg.input_hw[0], W = cfg.input_hw[1], p = cfg.patch_size;
    const int rows = H / p, cols = W / p, pp = p * p;
    const int in_vec = cfg.in_channels * pp;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            T* dst = patches + std::size_t(r * cols + c) * in_vec;
            for (int ch = 0; ch < cfg.in_channels; ++ch) {
                const T* src = img + std::size_t(ch) * H * W;
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        dst[ch * pp + dy * p + dx] = src[std::size_t(r * p + dy) * W + (c * p + dx)];
            }
        }
}

// Window attention given projected q/k/v ([N, dim] over the full grid):
// softmax(Q Kt / sqrt(dk)) V per window and head, heads re-concatenated into
// ctx [N, dim]. attn_cache (if non-null) receives the softmax probabilities,
// layout [window][head][m][m].
template <typename T>
void attention_core(int grid_r, int grid_c, int dim, int heads, int window, const T* q,
                    const T* k, const T* v, T* attn_cache, T* ctx) {
    const int w = window, m = w * w, dk = dim / heads;
    const int nwr = grid_r / w, nwc = grid_c / w, nw = nwr * nwc;
    const T scale = T(1) / std::sqrt(T(dk));
    std::vector<int> idx(m);
    std::vector<T> qh(m * dk), kh(m * dk), vh(m * dk), ow(m * dk), sc(m * m), pr(m * m);
    for (int win = 0; win < nw; ++win) {
        const int wr = win / nwc, wc = win % nwc;
        for (int i = 0; i < m; ++i)
            idx[i] = (wr * w + i / w) * grid_c + (wc * w + i % w);
        for (int hd = 0; hd < heads; ++hd) {
            const int off = hd * dk;
            for (int i = 0; i < m; ++i) {
                std::memcpy(&qh[i * dk], q + std::size_t(idx[i]) * dim + off, sizeof(T) * dk);
                std::memcpy(&kh[i * dk], k + std::size_t(idx[i]) * dim + off, sizeof(T) * dk);
                std::memcpy(&vh[i * dk], v + std::size_t(idx[i]) * dim + off, sizeof(T) * dk);
            }
            gemm_nt(m, m, dk, qh.data(), kh.data(), sc.data(), false);
            for (T& x : sc) x *= scale;
            T* a = attn_cache ? attn_cache + (std::size_t(win) * heads + hd) * m * m : pr.data();
            softmax_rows(m, m, sc.data(), a);
            gemm_nn(m, dk, m, a, vh.data(), ow.data(), false);
            for (int i = 0; i < m; ++i)
                std::memcpy(ctx + std::size_t(idx[i]) * dim + off, &ow[i * dk], sizeof(T) * dk);
        }
    }
}

template <typename T>
void merge_gather(int rows, int cols, int dim, const T* x, T* gathered) {
    const int cr = rows / 2, cc = cols / 2;
    for (int r = 0; r < cr; ++r)
        for (int c = 0; c < cc; ++c) {
            T* dst = gathered + std::size_t(r * cc + c) * 4 * dim;
            const int f[4] = {(2 * r) * cols + 2 * c, (2 * r) * cols + 2 * c + 1,
                              (2 * r + 1) * cols + 2 * c, (2 * r + 1) * cols + 2 * c + 1};
            for (int qi = 0; qi < 4; ++qi)
                std::memcpy(dst + qi * dim, x + std::size_t(f[qi]) * dim, sizeof(T) * dim);
        }
}

template <typename T>
void merge_scatter_grad(int rows, int cols, int dim, const T* dgathered, T* dx) {
    const int cr = rows / 2, cc = cols / 2;
    for (int r = 0; r < cr; ++r)
        for (int c = 0; c < cc; ++c) {
            const T* src = dgathered + std::size_t(r * cc + c) * 4 * dim;
            const int f[4] = {(2 * r) * cols + 2 * c, (2 * r) * cols + 2 * c + 1,
                              (2 * r + 1) * cols + 2 * c, (2 * r + 1) * cols + 2 * c + 1};
            for (int qi = 0; qi < 4; ++qi)
                std::memcpy(dx + std::size_t(f[qi]) * dim, src + qi * dim, sizeof(T) * dim);
        }
}

// y [N, 2*dim] -> fine grid [4N, dim/2]; fine (2r+i, 2c+j) gets slice (2i+j).
template <typename T>
void unmerge_scatter(int rows, int cols, int dim, const T* y, T* fine) {
    const int d2 = dim / 2, fc = 2 * cols;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const T* src = y + std::size_t(r * cols + c) * 2 * dim;
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j)
                    std::memcpy(fine + std::size_t((2 * r + i) * fc + (2 * c + j)) * d2,
                                src + (i * 2 + j) * d2, sizeof(T) * d2);
        }
}

template <typename T>
void unmerge_gather_grad(int rows, int cols, int dim, const T* dfine, T* dy) {
    const int d2 = dim / 2, fc = 2 * cols;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            T* dst = dy + std::size_t(r * cols + c) * 2 * dim;
            for (int i = 0; i < 2; ++i)
                for (int j = 0; j < 2; ++j)
                    std::memcpy(dst + (i * 2 + j) * d2,
                                dfine + std::size_t((2 * r + i) * fc + (2 * c + j)) * d2,
                                sizeof(T) * d2);
        }
}

}  // namespace

// ---- standalone ops ----

template <typename T>
std::vector<T> patch_embed_forward(const ModelConfig& cfg, const Tensor<T>& w, const Tensor<T>& b,
                                   const Tensor<T>& pos, const std::vector<T>& img) {
    if (std::int64_t(img.size()) != cfg.input_size())
        throw ShapeError("patch_embed: input size mismatch");
    const int d = cfg.embed_dim;
    const int in_vec = cfg.in_channels * cfg.patch_size * cfg.patch_size;
    const int n0 = (cfg.input_hw[0] / cfg.patch_size) * (cfg.input_hw[1] / cfg.patch_size);
    std::vector<T> patches(std::size_t(n0) * in_vec), out(std::size_t(n0) * d);
    patchify(cfg, img.data(), patches.data());
    linear_forward(n0, in_vec, d, patches.data(), w.data(), b.data(), out.data());
    if (cfg.use_pos_embed) {
        if (pos.size() != std::int64_t(n0) * d) throw ShapeError("patch_embed: pos embed size mismatch");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += pos.v[i];
    }
    return out;
}

template <typename T>
std::vector<T> w_mha_forward(int rows, int cols, int dim, int heads, int window,
                             const AttnParams<T>& p, const std::vector<T>& tokens) {
    const int n = rows * cols;
    if (std::int64_t(tokens.size()) != std::int64_t(n) * dim)
        throw ShapeError("w_mha: token buffer size mismatch");
    if (rows % window != 0 || cols % window != 0)
        throw ShapeError("w_mha: grid not divisible by window");
    if (dim % heads != 0) throw ShapeError("w_mha: dim not divisible by heads");
    std::vector<T> q(tokens.size()), k(tokens.size()), v(tokens.size()), ctx(tokens.size()),
        out(tokens.size());
    linear_forward(n, dim, dim, tokens.data(), p.wq.data(), p.bq.data(), q.data());
    linear_forward(n, dim, dim, tokens.data(), p.wk.data(), p.bk.data(), k.data());
    linear_forward(n, dim, dim, tokens.data(), p.wv.data(), p.bv.data(), v.data());
    attention_core(rows, cols, dim, heads, window, q.data(), k.data(), v.data(), (T*)nullptr,
                   ctx.data());
    linear_forward(n, dim, dim, ctx.data(), p.wo.data(), p.bo.data(), out.data());
    return out;
}

template <typename T>
std::vector<T> merge_forward(int rows, int cols, int dim, const Tensor<T>& w, const Tensor<T>& b,
                             const std::vector<T>& x) {
    if (rows % 2 != 0 || cols % 2 != 0) throw ShapeError("merge: grid must be even");
    if (std::int64_t(x.size()) != std::int64_t(rows) * cols * dim)
        throw ShapeError("merge: token buffer size mismatch");
    const int nc = (rows / 2) * (cols / 2);
    std::vector<T> gathered(std::size_t(nc) * 4 * dim), out(std::size_t(nc) * 2 * dim);
    merge_gather(rows, cols, dim, x.data(), gathered.data());
    linear_forward(nc, 4 * dim, 2 * dim, gathered.data(), w.data(), b.data(), out.data());
    return out;
}

template <typename T>
std::vector<T> unmerge_forward(int rows, int cols, int dim, const Tensor<T>& w, const Tensor<T>& b,
                               const std::vector<T>& x) {
    if (dim % 2 != 0) throw ShapeError("unmerge: dim must be even");
    if (std::int64_t(x.size()) != std::int64_t(rows) * cols * dim)
        throw ShapeError("unmerge: token buffer size mismatch");
    const int n = rows * cols;
    std::vector<T> y(std::size_t(n) * 2 * dim), fine(std::size_t(4 * n) * (dim / 2));
    linear_forward(n, dim, 2 * dim, x.data(), w.data(), b.data(), y.data());
    unmerge_scatter(rows, cols, dim, y.data(), fine.data());
    return fine;
}

// ---- network ----

template <typename T>
Net<T>::Net(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    alloc_params(cfg_, params_);
    alloc_params(cfg_, grads_);
    const int in_vec = cfg_.in_channels * cfg_.patch_size * cfg_.patch_size;
    const auto fg = cfg_.final_grid();
    const int n0 = fg[0] * fg[1];
    patches_.assign(std::size_t(n0) * in_vec, T(0));
    const int w = cfg_.window_size;
    std::size_t xmax = 0;
    auto alloc_stage = [&](const StageShape& s, detail::StageCache<T>& c, bool encoder) {
        const std::size_t nd = std::size_t(s.tokens()) * s.dim;
        const int nw = (s.grid_r / w) * (s.grid_c / w);
        c.blocks.resize(s.depth);
        for (auto& bc : c.blocks) {
            bc.ln1.xhat.assign(nd, T(0));
            bc.ln1.invstd.assign(s.tokens(), T(0));
            bc.ln2 = bc.ln1;
            bc.q.assign(nd, T(0));
            bc.k.assign(nd, T(0));
            bc.v.assign(nd, T(0));
            bc.attn.assign(std::size_t(nw) * s.heads * w * w * w * w, T(0));
            bc.ctx.assign(nd, T(0));
            bc.h_pre.assign(std::size_t(s.tokens()) * s.hidden, T(0));
            bc.h_act = bc.h_pre;
        }
        if (encoder)
            c.gathered.assign(nd, T(0));  // (N/4) * 4d
        else
            c.trans_in.assign(nd, T(0));
        xmax = std::max(xmax, 2 * nd);  // unmerge output is [N, 2d]
    };
    const auto enc = cfg_.encoder_stages();
    const auto dec = cfg_.decoder_stages();
    enc_cache_.resize(enc.size());
    dec_cache_.resize(dec.size());
    for (std::size_t s = 0; s < enc.size(); ++s) alloc_stage(enc[s], enc_cache_[s], true);
    for (std::size_t s = 0; s < dec.size(); ++s) alloc_stage(dec[s], dec_cache_[s], false);
    final_ln_.xhat.assign(std::size_t(n0) * cfg_.embed_dim, T(0));
    final_ln_.invstd.assign(n0, T(0));
    head_in_.assign(std::size_t(n0) * cfg_.embed_dim, T(0));
    out_.assign(std::size_t(cfg_.output_size()), T(0));
    xbuf_.assign(xmax, T(0));
    tbuf_.assign(xmax, T(0));
}

template <typename T>
void Net<T>::init_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    auto trunc = [&]() {
        double x = dist(rng);
        while (std::abs(x) > 0.04) x = dist(rng);
        return T(x);
    };
    for (auto& [name, t] : tensor_list(params_)) {
        if (name.size() >= 2 && name.compare(name.size() - 2, 2, "_g") == 0) {
            std::fill(t->v.begin(), t->v.end(), T(1));
        } else if (name.size() >= 2 && name.compare(name.size() - 2, 2, "_b") == 0) {
            std::fill(t->v.begin(), t->v.end(), T(0));
        } else {
            for (T& x : t->v) x = trunc();
        }
    }
    zero_grad();
}

template <typename T>
void Net<T>::zero_grad() {
    for (auto& [name, t] : tensor_list(grads_)) std::fill(t->v.begin(), t->v.end(), T(0));
}

template <typename T>
std::int64_t Net<T>::param_count_allocated() {
    std::int64_t n = 0;
    for (auto& [name, t] : tensor_list(params_)) n += t->size();
    return n;
}

template <typename T>
void Net<T>::block_forward(std::vector<T>& x, const StageShape& s, BlockParams<T>& p,
                           detail::BlockCache<T>& c) {
    const int n = s.tokens(), dim = s.dim;
    layernorm_forward(n, dim, x.data(), p.ln1_g.data(), p.ln1_b.data(), tbuf_.data(),
                      c.ln1.xhat.data(), c.ln1.invstd.data());
    linear_forward(n, dim, dim, tbuf_.data(), p.attn.wq.data(), p.attn.bq.data(), c.q.data());
    linear_forward(n, dim, dim, tbuf_.data(), p.attn.wk.data(), p.attn.bk.data(), c.k.data());
    linear_forward(n, dim, dim, tbuf_.data(), p.attn.wv.data(), p.attn.bv.data(), c.v.data());
    attention_core(s.grid_r, s.grid_c, dim, s.heads, cfg_.window_size, c.q.data(), c.k.data(),
                   c.v.data(), c.attn.data(), c.ctx.data());
    linear_forward(n, dim, dim, c.ctx.data(), p.attn.wo.data(), p.attn.bo.data(), tbuf_.data());
    for (std::size_t i = 0; i < std::size_t(n) * dim; ++i) x[i] += tbuf_[i];

    layernorm_forward(n, dim, x.data(), p.ln2_g.data(), p.ln2_b.data(), tbuf_.data(),
                      c.ln2.xhat.data(), c.ln2.invstd.data());
    linear_forward(n, dim, s.hidden, tbuf_.data(), p.w1.data(), p.b1.data(), c.h_pre.data());
    for (std::size_t i = 0; i < c.h_pre.size(); ++i) c.h_act[i] = gelu(c.h_pre[i]);
    linear_forward(n, s.hidden, dim, c.h_act.data(), p.w2.data(), p.b2.data(), tbuf_.data());
    for (std::size_t i = 0; i < std::size_t(n) * dim; ++i) x[i] += tbuf_[i];
}

template <typename T>
const std::vector<T>& Net<T>::forward(const std::vector<T>& input) {
    if (std::int64_t(input.size()) != cfg_.input_size())
        throw ShapeError("model forward: input has " + std::to_string(input.size()) +
                         " values, expected " + std::to_string(cfg_.input_size()));
    const auto fg = cfg_.final_grid();
    const int n0 = fg[0] * fg[1], d = cfg_.embed_dim;
    const int in_vec = cfg_.in_channels * cfg_.patch_size * cfg_.patch_size;
    patchify(cfg_, input.data(), patches_.data());
    linear_forward(n0, in_vec, d, patches_.data(), params_.patch_w.data(), params_.patch_b.data(),
                   xbuf_.data());
    if (cfg_.use_pos_embed)
        for (std::size_t i = 0; i < std::size_t(n0) * d; ++i) xbuf_[i] += params_.pos_embed.v[i];

    const auto enc = cfg_.encoder_stages();
    for (std::size_t s = 0; s < enc.size(); ++s) {
        auto& st = enc[s];
        for (int b = 0; b < st.depth; ++b)
            block_forward(xbuf_, st, params_.enc[s].blocks[b], enc_cache_[s].blocks[b]);
        const int nc = st.tokens() / 4;
        merge_gather(st.grid_r, st.grid_c, st.dim, xbuf_.data(), enc_cache_[s].gathered.data());
        linear_forward(nc, 4 * st.dim, 2 * st.dim, enc_cache_[s].gathered.data(),
                       params_.enc[s].trans_w.data(), params_.enc[s].trans_b.data(), xbuf_.data());
    }
    const auto dec = cfg_.decoder_stages();
    for (std::size_t s = 0; s < dec.size(); ++s) {
        auto& st = dec[s];
        for (int b = 0; b < st.depth; ++b)
            block_forward(xbuf_, st, params_.dec[s].blocks[b], dec_cache_[s].blocks[b]);
        const std::size_t nd = std::size_t(st.tokens()) * st.dim;
        std::memcpy(dec_cache_[s].trans_in.data(), xbuf_.data(), sizeof(T) * nd);
        linear_forward(st.tokens(), st.dim, 2 * st.dim, dec_cache_[s].trans_in.data(),
                       params_.dec[s].trans_w.data(), params_.dec[s].trans_b.data(), tbuf_.data());
        unmerge_scatter(st.grid_r, st.grid_c, st.dim, tbuf_.data(), xbuf_.data());
    }
    layernorm_forward(n0, d, xbuf_.data(), params_.final_ln_g.data(), params_.final_ln_b.data(),
                      head_in_.data(), final_ln_.xhat.data(), final_ln_.invstd.data());
    const int out_vec = cfg_.out_patch * cfg_.out_patch * cfg_.out_depth;
    linear_forward(n0, d, out_vec, head_in_.data(), params_.head_w.data(), params_.head_b.data(),
                   out_.data());
    have_forward_ = true;
    return out_;
}

template <typename T>
void Net<T>::block_backward(std::vector<T>& dx, const StageShape& s, BlockParams<T>& p,
                            BlockParams<T>& g, detail::BlockCache<T>& c) {
    const int n = s.tokens(), dim = s.dim, heads = s.heads, hid = s.hidden;
    const int w = cfg_.window_size, m = w * w, dk = dim / heads;
    const int nwc = s.grid_c / w, nw = (s.grid_r / w) * nwc;
    const std::size_t nd = std::size_t(n) * dim;

    // MLP branch: x_out = x_mid + W2(gelu(W1(LN2(x_mid)))).
    for (int i = 0; i < n; ++i)  // recompute LN2 output
        for (int j = 0; j < dim; ++j)
            tbuf_[std::size_t(i) * dim + j] =
                c.ln2.xhat[std::size_t(i) * dim + j] * p.ln2_g.v[j] + p.ln2_b.v[j];
    std::vector<T> dh(std::size_t(n) * hid), dln(nd);
    linear_backward(n, hid, dim, c.h_act.data(), p.w2.data(), dx.data(), g.w2.data(), g.b2.data(),
                    dh.data(), false);
    for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= gelu_grad(c.h_pre[i]);
    linear_backward(n, dim, hid, tbuf_.data(), p.w1.data(), dh.data(), g.w1.data(), g.b1.data(),
                    dln.data(), false);
    layernorm_backward(n, dim, c.ln2.xhat.data(), c.ln2.invstd.data(), p.ln2_g.data(), dln.data(),
                       g.ln2_g.data(), g.ln2_b.data(), dx.data(), true);

    // Attention branch: x_mid = x_in + Wo(ctx).
    std::vector<T> dctx(nd), dq(nd, T(0)), dkk(nd, T(0)), dvv(nd, T(0));
    linear_backward(n, dim, dim, c.ctx.data(), p.attn.wo.data(), dx.data(), g.attn.wo.data(),
                    g.attn.bo.data(), dctx.data(), false);
    {
        const T scale = T(1) / std::sqrt(T(dk));
        std::vector<int> idx(m);
        std::vector<T> qh(m * dk), kh(m * dk), vh(m * dk), dow(m * dk), dqh(m * dk), dkh(m * dk),
            dvh(m * dk), da(m * m), ds(m * m);
        for (int win = 0; win < nw; ++win) {
            const int wr = win / nwc, wc = win % nwc;
            for (int i = 0; i < m; ++i)
                idx[i] = (wr * w + i / w) * s.grid_c + (wc * w + i % w);
            for (int hd = 0; hd < heads; ++hd) {
                const int off = hd * dk;
                for (int i = 0; i < m; ++i) {
                    std::memcpy(&qh[i * dk], c.q.data() + std::size_t(idx[i]) * dim + off,
                                sizeof(T) * dk);
                    std::memcpy(&kh[i * dk], c.k.data() + std::size_t(idx[i]) * dim + off,
                                sizeof(T) * dk);
                    std::memcpy(&vh[i * dk], c.v.data() + std::size_t(idx[i]) * dim + off,
                                sizeof(T) * dk);
                    std::memcpy(&dow[i * dk], dctx.data() + std::size_t(idx[i]) * dim + off,
                                sizeof(T) * dk);
                }
                const T* a = c.attn.data() + (std::size_t(win) * heads + hd) * m * m;
                gemm_nt(m, m, dk, dow.data(), vh.data(), da.data(), false);
                gemm_tn(m, dk, m, a, dow.data(), dvh.data(), false);
                softmax_backward_rows(m, m, a, da.data(), ds.data());
                for (T& x : ds) x *= scale;
                gemm_nn(m, dk, m, ds.data(), kh.data(), dqh.data(), false);
                gemm_tn(m, dk, m, ds.data(), qh.data(), dkh.data(), false);
                for (int i = 0; i < m; ++i) {
                    T* tq = dq.data() + std::size_t(idx[i]) * dim + off;
                    T* tk = dkk.data() + std::size_t(idx[i]) * dim + off;
                    T* tv = dvv.data() + std::size_t(idx[i]) * dim + off;
                    for (int j = 0; j < dk; ++j) {
                        tq[j] += dqh[i * dk + j];
                        tk[j] += dkh[i * dk + j];
                        tv[j] += dvh[i * dk + j];
                    }
                }
            }
        }
    }
    for (int i = 0; i < n; ++i)  // recompute LN1 output
        for (int j = 0; j < dim; ++j)
            tbuf_[std::size_t(i) * dim + j] =
                c.ln1.xhat[std::size_t(i) * dim + j] * p.ln1_g.v[j] + p.ln1_b.v[j];
    linear_backward(n, dim, dim, tbuf_.data(), p.attn.wq.data(), dq.data(), g.attn.wq.data(),
                    g.attn.bq.data(), dln.data(), false);
    linear_backward(n, dim, dim, tbuf_.data(), p.attn.wk.data(), dkk.data(), g.attn.wk.data(),
                    g.attn.bk.data(), dln.data(), true);
    linear_backward(n, dim, dim, tbuf_.data(), p.attn.wv.data(), dvv.data(), g.attn.wv.data(),
                    g.attn.bv.data(), dln.data(), true);
    layernorm_backward(n, dim, c.ln1.xhat.data(), c.ln1.invstd.data(), p.ln1_g.data(), dln.data(),
                       g.ln1_g.data(), g.ln1_b.data(), dx.data(), true);
}

template <typename T>
void Net<T>::backward(const std::vector<T>& dout) {
    if (!have_forward_) throw NumericError("model backward: no forward pass cached");
    if (std::int64_t(dout.size()) != cfg_.output_size())
        throw ShapeError("model backward: gradient has " + std::to_string(dout.size()) +
                         " values, expected " + std::to_string(cfg_.output_size()));
    const auto fg = cfg_.final_grid();
    const int n0 = fg[0] * fg[1], d = cfg_.embed_dim;
    const int out_vec = cfg_.out_patch * cfg_.out_patch * cfg_.out_depth;
    std::vector<T> dxb(xbuf_.size()), scratch(xbuf_.size());
    linear_backward(n0, d, out_vec, head_in_.data(), params_.head_w.data(), dout.data(),
                    grads_.head_w.data(), grads_.head_b.data(), scratch.data(), false);
    layernorm_backward(n0, d, final_ln_.xhat.data(), final_ln_.invstd.data(),
                       params_.final_ln_g.data(), scratch.data(), grads_.final_ln_g.data(),
                       grads_.final_ln_b.data(), dxb.data(), false);

    const auto dec = cfg_.decoder_stages();
    for (int s = int(dec.size()) - 1; s >= 0; --s) {
        auto& st = dec[s];
        unmerge_gather_grad(st.grid_r, st.grid_c, st.dim, dxb.data(), scratch.data());
        linear_backward(st.tokens(), st.dim, 2 * st.dim, dec_cache_[s].trans_in.data(),
                        params_.dec[s].trans_w.data(), scratch.data(),
                        grads_.dec[s].trans_w.data(), grads_.dec[s].trans_b.data(), dxb.data(),
                        false);
        for (int b = st.depth - 1; b >= 0; --b)
            block_backward(dxb, st, params_.dec[s].blocks[b], grads_.dec[s].blocks[b],
                           dec_cache_[s].blocks[b]);
    }
    const auto enc = cfg_.encoder_stages();
    for (int s = int(enc.size()) - 1; s >= 0; --s) {
        auto& st = enc[s];
        const int nc = st.tokens() / 4;
        linear_backward(nc, 4 * st.dim, 2 * st.dim, enc_cache_[s].gathered.data(),
                        params_.enc[s].trans_w.data(), dxb.data(), grads_.enc[s].trans_w.data(),
                        grads_.enc[s].trans_b.data(), scratch.data(), false);
        merge_scatter_grad(st.grid_r, st.grid_c, st.dim, scratch.data(), dxb.data());
        for (int b = st.depth - 1; b >= 0; --b)
            block_backward(dxb, st, params_.enc[s].blocks[b], grads_.enc[s].blocks[b],
                           enc_cache_[s].blocks[b]);
    }
    if (cfg_.use_pos_embed)
        for (std::size_t i = 0; i < std::size_t(n0) * d; ++i) grads_.pos_embed.v[i] += dxb[i];
    const int in_vec = cfg_.in_channels * cfg_.patch_size * cfg_.patch_size;
    linear_backward(n0, in_vec, d, patches_.data(), params_.patch_w.data(), dxb.data(),
                    grads_.patch_w.data(), grads_.patch_b.data(), (T*)nullptr, false);
}

// ---- packing ----

template <typename T>
std::vector<T> pack_kv_input(const ModelConfig& cfg, const Image2D& ap, const Image2D& lat) {
    if (cfg.in_channels != 2) throw ShapeError("pack_kv_input: model expects 2 input channels");
    for (const Image2D* img : {&ap, &lat})
        if (img->nv != cfg.input_hw[0] || img->nu != cfg.input_hw[1])
            throw ShapeError("pack_kv_input: image " + std::to_string(img->nu) + "x" +
                             std::to_string(img->nv) + " does not match model input " +
                             std::to_string(cfg.input_hw[1]) + "x" + std::to_string(cfg.input_hw[0]));
    const std::size_t hw = std::size_t(cfg.input_hw[0]) * cfg.input_hw[1];
    std::vector<T> out(2 * hw);
    for (std::size_t i = 0; i < hw; ++i) out[i] = T((ap.data[i] - cfg.kv_center) / cfg.kv_scale);
    for (std::size_t i = 0; i < hw; ++i)
        out[hw + i] = T((lat.data[i] - cfg.kv_center) / cfg.kv_scale);
    return out;
}

template <typename T>
std::vector<T> pack_ct_target(const ModelConfig& cfg, const Volume3D& vol) {
    const auto od = cfg.output_dims();
    if (vol.dims != od)
        throw ShapeError("pack_ct_target: volume " + std::to_string(vol.dims[0]) + "x" +
                         std::to_string(vol.dims[1]) + "x" + std::to_string(vol.dims[2]) +
                         " does not match model output " + std::to_string(od[0]) + "x" +
                         std::to_string(od[1]) + "x" + std::to_string(od[2]));
    const int q = cfg.out_patch, D = cfg.out_depth;
    const auto fg = cfg.final_grid();
    const int cols = fg[1], out_vec = q * q * D;
    std::vector<T> out(std::size_t(cfg.output_size()));
    for (int z = 0; z < od[2]; ++z)
        for (int y = 0; y < od[1]; ++y)
            for (int x = 0; x < od[0]; ++x) {
                const int t = (z / q) * cols + (y / q);
                const int j = ((z % q) * q + (y % q)) * D + x;
                out[std::size_t(t) * out_vec + j] =
                    T((vol.at(x, y, z) - cfg.hu_center) / cfg.hu_scale);
            }
    return out;
}

template <typename T>
Volume3D unpack_output(const ModelConfig& cfg, const std::vector<T>& out, const VolumeMeta& meta) {
    if (std::int64_t(out.size()) != cfg.output_size())
        throw ShapeError("unpack_output: buffer size mismatch");
    const auto od = cfg.output_dims();
    Volume3D vol(od, meta.spacing_mm, meta.origin_mm, "HU");
    const int q = cfg.out_patch, D = cfg.out_depth;
    const int cols = cfg.final_grid()[1], out_vec = q * q * D;
    for (int z = 0; z < od[2]; ++z)
        for (int y = 0; y < od[1]; ++y)
            for (int x = 0; x < od[0]; ++x) {
                const int t = (z / q) * cols + (y / q);
                const int j = ((z % q) * q + (y % q)) * D + x;
                vol.at(x, y, z) =
                    float(double(out[std::size_t(t) * out_vec + j]) * cfg.hu_scale + cfg.hu_center);
            }
    return vol;
}

// ---- checkpoints ----

namespace {

json config_to_json(const ModelConfig& c) {
    json j;
    j["input_hw"] = c.input_hw;
    j["in_channels"] = c.in_channels;
    j["patch_size"] = c.patch_size;
    j["embed_dim"] = c.embed_dim;
    j["encoder_depths"] = c.encoder_depths;
    j["decoder_depths"] = c.decoder_depths;
    j["encoder_heads"] = c.encoder_heads;
    j["decoder_heads"] = c.decoder_heads;
    j["window_size"] = c.window_size;
    j["mlp_ratio"] = c.mlp_ratio;
    j["out_depth"] = c.out_depth;
    j["out_patch"] = c.out_patch;
    j["use_pos_embed"] = c.use_pos_embed;
    j["model_tag"] = c.model_tag;
    j["hu_center"] = c.hu_center;
    j["hu_scale"] = c.hu_scale;
    j["kv_center"] = c.kv_center;
    j["kv_scale"] = c.kv_scale;
    return j;
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    j.at("input_hw").get_to(c.input_hw);
    j.at("in_channels").get_to(c.in_channels);
    j.at("patch_size").get_to(c.patch_size);
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("encoder_depths").get_to(c.encoder_depths);
    j.at("decoder_depths").get_to(c.decoder_depths);
    j.at("encoder_heads").get_to(c.encoder_heads);
    j.at("decoder_heads").get_to(c.decoder_heads);
    j.at("window_size").get_to(c.window_size);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("out_depth").get_to(c.out_depth);
    j.at("out_patch").get_to(c.out_patch);
    j.at("use_pos_embed").get_to(c.use_pos_embed);
    j.at("model_tag").get_to(c.model_tag);
    j.at("hu_center").get_to(c.hu_center);
    j.at("hu_scale").get_to(c.hu_scale);
    j.at("kv_center").get_to(c.kv_center);
    j.at("kv_scale").get_to(c.kv_scale);
    return c;
}

}  // namespace

void model_config_to_json_file(const ModelConfig& cfg, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << config_to_json(cfg).dump(2) << "\n";
}

template <typename T>
void save_checkpoint(Net<T>& net, const std::string& stem) {
    json j;
    j["format"] = "kv2ct-model-v1";
    j["config"] = config_to_json(net.config());
    json tensors = json::array();
    std::int64_t offset = 0;
    auto list = tensor_list(net.params());
    for (auto& [name, t] : list) {
        json e;
        e["name"] = name;
        e["shape"] = t->shape;
        e["offset"] = offset;
        e["count"] = t->size();
        tensors.push_back(e);
        offset += t->size();
    }
    j["tensors"] = tensors;
    j["total_values"] = offset;
    {
        std::ofstream f(stem + ".json");
        if (!f) throw IoError("cannot open " + stem + ".json for writing");
        f << j.dump(2) << "\n";
    }
    std::ofstream f(stem + ".bin", std::ios::binary);
    if (!f) throw IoError("cannot open " + stem + ".bin for writing");
    std::vector<float> row;
    for (auto& [name, t] : list) {
        row.resize(std::size_t(t->size()));
        for (std::int64_t i = 0; i < t->size(); ++i) row[std::size_t(i)] = float(t->v[std::size_t(i)]);
        f.write(reinterpret_cast<const char*>(row.data()),
                std::streamsize(row.size() * sizeof(float)));
    }
    if (!f) throw IoError("short write to " + stem + ".bin");
}

template <typename T>
Net<T> load_checkpoint(const std::string& stem) {
    std::ifstream hf(stem + ".json");
    if (!hf) throw IoError("cannot open " + stem + ".json");
    json j;
    try {
        hf >> j;
    } catch (const json::exception& e) {
        throw IoError("bad checkpoint header " + stem + ".json: " + e.what());
    }
    if (j.value("format", "") != "kv2ct-model-v1")
        throw IoError("unrecognized checkpoint format in " + stem + ".json");
    Net<T> net(config_from_json(j.at("config")));
    std::ifstream f(stem + ".bin", std::ios::binary);
    if (!f) throw IoError("cannot open " + stem + ".bin");
    auto list = tensor_list(net.params());
    const json& tensors = j.at("tensors");
    if (tensors.size() != list.size())
        throw IoError("checkpoint " + stem + ": tensor count mismatch");
    std::vector<float> row;
    for (std::size_t i = 0; i < list.size(); ++i) {
        auto& [name, t] = list[i];
        if (tensors[i].at("name").get<std::string>() != name ||
            tensors[i].at("count").get<std::int64_t>() != t->size())
            throw IoError("checkpoint " + stem + ": tensor layout mismatch at " + name);
        row.resize(std::size_t(t->size()));
        f.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size() * sizeof(float)));
        if (!f) throw IoError("checkpoint " + stem + ".bin is truncated at " + name);
        for (std::int64_t k = 0; k < t->size(); ++k) t->v[std::size_t(k)] = T(row[std::size_t(k)]);
    }
    return net;
}

// ---- explicit instantiations ----

template class Net<float>;
template class Net<double>;

#define KV2CT_INSTANTIATE(T)                                                                     \
    template std::vector<std::pair<std::string, Tensor<T>*>> tensor_list<T>(ModelParams<T>&);    \
    template std::vector<T> patch_embed_forward<T>(const ModelConfig&, const Tensor<T>&,         \
                                                   const Tensor<T>&, const Tensor<T>&,           \
                                                   const std::vector<T>&);                       \
    template std::vector<T> w_mha_forward<T>(int, int, int, int, int, const AttnParams<T>&,      \
                                             const std::vector<T>&);                             \
    template std::vector<T> merge_forward<T>(int, int, int, const Tensor<T>&, const Tensor<T>&,  \
                                             const std::vector<T>&);                             \
    template std::vector<T> unmerge_forward<T>(int, int, int, const Tensor<T>&,                  \
                                               const Tensor<T>&, const std::vector<T>&);         \
    template std::vector<T> pack_kv_input<T>(const ModelConfig&, const Image2D&, const Image2D&); \
    template std::vector<T> pack_ct_target<T>(const ModelConfig&, const Volume3D&);              \
    template Volume3D unpack_output<T>(const ModelConfig&, const std::vector<T>&,                \
                                       const VolumeMeta&);                                       \
    template void save_checkpoint<T>(Net<T>&, const std::string&);                               \
    template Net<T> load_checkpoint<T>(const std::string&);

KV2CT_INSTANTIATE(float)
KV2CT_INSTANTIATE(double)
#undef KV2CT_INSTANTIATE

}  // namespace kv2ct
