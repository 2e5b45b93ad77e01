#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "nsp/linalg.hpp"

namespace nsp {

/// Frozen per-layer transformer weights. Byte-identical across all tasks once
/// the backbone is initialized.
struct LayerParams {
    Matrix w_q, w_k, w_v;  // D x D
    Vector b_q, b_k, b_v;  // D
    Vector ln1_alpha, ln1_beta;
    Vector ln2_alpha, ln2_beta;
    Matrix mlp_w1;  // D x Dff
    Vector mlp_b1;  // Dff
    Matrix mlp_w2;  // Dff x D
    Vector mlp_b2;  // D
    int heads = 1;

    int dim() const { return static_cast<int>(w_q.rows()); }
    int head_dim() const { return dim() / heads; }
};

/// Per-head attention capture. Prompt query rows are never computed, so
/// `a_z`/`s_x`/`s_p` have only the N image-query rows.
struct HeadTrace {
    Matrix q_x;  // N x d
    Matrix k_z;  // (N+M) x d
    Matrix v_z;  // (N+M) x d
    Matrix a_z;  // N x (N+M)
    Matrix s_x;  // N x N
    Matrix s_p;  // N x M
};

struct AttentionTrace {
    std::vector<HeadTrace> heads;
    Matrix f_z;            // N x D, after head concatenation
    RowStats prompt_stats; // row stats of the raw prompts entering this layer
};

/// Everything the backward pass needs from one layer forward.
struct LayerCache {
    Matrix x, p;
    bool bypass = false;
    Matrix zn;  // LN1 output, (N+M) x D
    RowStats ln1_stats;
    Matrix q_x;           // N x D (all heads side by side)
    Matrix k_z, v_z;      // (N+M) x D
    std::vector<Matrix> s;  // per head, N x (N+M)
    Matrix f;   // N x D
    Matrix y;   // N x D, after first residual
    Matrix yn;  // N x D, LN2 output
    RowStats ln2_stats;
    Matrix h_pre, h_act;  // N x Dff
};

/// One transformer layer for prompted tokens Z = [X; P]:
/// LN1 -> per-head QKV (prompt queries dropped) -> affinity -> row softmax ->
/// aggregation -> head concat -> residual -> LN2 -> MLP (GELU) -> residual.
/// Output prompt rows are discarded (VPT-Deep). `ln_bypass_prompts` routes the
/// prompt rows around LN1; used only by consistency tests, never in training.
Matrix layer_forward(const Matrix& x, const Matrix& p, const LayerParams& lp,
                     double ln_eps, bool ln_bypass_prompts,
                     LayerCache* cache, AttentionTrace* trace);

/// Reverse-mode gradient of one layer w.r.t. its token and prompt inputs.
std::pair<Matrix, Matrix> layer_backward(const LayerParams& lp,
                                         const LayerCache& cache,
                                         const Matrix& d_out);

// Per-head QKV slices used for affinity/aggregation; exposed for tests.
Matrix affinity(const Matrix& q_x, const Matrix& k_z);
Matrix aggregate(const Matrix& s_z, const Matrix& v_z);
void qkv_transform(const Matrix& normed, const LayerParams& lp, int n_queries,
                   Matrix* q, Matrix* k, Matrix* v);

struct ClassifierHead {
    Matrix w;  // D x classes
    Vector b;  // classes
};

struct ModelSpec {
    int image_size = 16;
    int patch_size = 4;
    int dim = 32;
    int heads = 4;
    int layers = 2;
    int prompts = 4;
    double ln_eps = 1e-6;
};

struct BackboneModel {
    int image_size = 16, patch_size = 4;
    double ln_eps = 1e-6;
    Matrix patch_embedding;  // patch_dim x D
    Vector class_token;      // D
    std::vector<LayerParams> layers;
    std::vector<Matrix> prompts;  // per layer, M x D, trainable
    std::vector<ClassifierHead> task_heads;
    bool ln_bypass_prompts = false;  // test mode only

    int dim() const { return static_cast<int>(class_token.size()); }
    int num_prompts() const { return static_cast<int>(prompts[0].rows()); }
    int num_patches() const {
        int per_side = image_size / patch_size;
        return per_side * per_side;
    }
    int num_tokens() const { return 1 + num_patches(); }

    /// Patchify an image (row-major pixels) and embed; class token at row 0.
    Matrix tokenize(const Vector& image) const;
};

/// Row-major patches of a square image, one flattened patch per row.
Matrix patchify(const Vector& image, int image_size, int patch_size);

BackboneModel make_model(const ModelSpec& spec, std::mt19937_64& rng);

/// Hash of every frozen parameter; constant over a run by contract.
std::uint64_t backbone_hash(const BackboneModel& model);

struct ForwardCache {
    std::vector<LayerCache> layers;
    Vector embedding;  // final class-token embedding
    Vector logits;     // concatenated over all task heads, unscaled
};

/// Forward through all layers with fresh prompts per layer; logits are the
/// concatenation of every task head applied to the final class token.
Vector model_forward(const BackboneModel& model, const Matrix& tokens,
                     ForwardCache* cache, std::vector<AttentionTrace>* traces);

struct PromptGradients {
    std::vector<Matrix> prompts;  // per layer, M x D
    Matrix head_w;                // current task head
    Vector head_b;
    double loss = 0.0;
};

/// Mean temperature-scaled cross-entropy over a batch, with exact
/// reverse-mode gradients for every prompt matrix and the current (last)
/// task head. Frozen parameters receive no gradient. With `local_softmax`
/// the loss covers only the current head's logits (labels are local class
/// indices); heads are concatenated at evaluation time, never in training,
/// so per-head logit levels stay comparable across tasks. If `d_tokens` is
/// given, per-sample input-token gradients are written there (pretraining).
PromptGradients classification_gradients(
    const BackboneModel& model,
    const std::vector<std::pair<Matrix, int>>& batch,  // (tokens, logit index)
    double tau, bool local_softmax = false,
    std::vector<Matrix>* d_tokens = nullptr);

/// Per-layer inputs of the two consistency conditions, rows stacked over
/// samples and heads: j1 collects Q_X,h W_k,h^T blocks, j2 collects S_P,h
/// blocks. `x_in` additionally collects the raw image tokens entering the
/// layer (used by the PGP comparison baseline).
struct ProjectionInputs {
    Matrix j1;    // (samples*H*N) x D
    Matrix j2;    // (samples*H*N) x M
    Matrix x_in;  // (samples*N) x D
};

std::vector<ProjectionInputs> collect_projection_inputs(
    const BackboneModel& model, const std::vector<Matrix>& token_batch);

}  // namespace nsp
