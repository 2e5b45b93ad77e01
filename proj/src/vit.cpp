#include "nsp/vit.hpp"

#include <cmath>
#include <cstring>

#include "nsp/rng.hpp"

namespace nsp {

namespace {

constexpr double kInvSqrt2Pi = 0.3989422804014327;

double gauss_cdf(double v) { return 0.5 * (1.0 + std::erf(v / std::sqrt(2.0))); }

Matrix gelu(const Matrix& x) {
    return x.array() * x.unaryExpr(&gauss_cdf).array();
}

Matrix gelu_grad(const Matrix& x) {
    Eigen::ArrayXXd cdf = x.unaryExpr(&gauss_cdf).array();
    Eigen::ArrayXXd pdf = kInvSqrt2Pi * (-0.5 * x.array().square()).exp();
    return cdf + x.array() * pdf;
}

/// Backward through layer_norm given the original input rows and the stats
/// recorded in the forward pass (std = sqrt(var + eps)).
Matrix layer_norm_backward(const Matrix& input, const RowStats& st,
                           const Vector& alpha, const Matrix& dy) {
    Matrix xhat =
        (input.colwise() - st.mean).array().colwise() / st.std.array();
    Matrix dxhat = dy.array().rowwise() * alpha.transpose().array();
    Vector m1 = dxhat.rowwise().mean();
    Vector m2 = (dxhat.array() * xhat.array()).rowwise().mean();
    Matrix dx = (dxhat.colwise() - m1).array() -
                (xhat.array().colwise() * m2.array());
    return dx.array().colwise() / st.std.array();
}

RowStats row_stats(const Matrix& rows, double eps) {
    RowStats st;
    st.mean = rows.rowwise().mean();
    Vector var =
        (rows.colwise() - st.mean).array().square().rowwise().mean();
    st.std = (var.array() + eps).sqrt();
    return st;
}

}  // namespace

Matrix affinity(const Matrix& q_x, const Matrix& k_z) {
    require(q_x.cols() == k_z.cols(), "affinity: inner dimensions differ");
    const double scale = 1.0 / std::sqrt(static_cast<double>(q_x.cols()));
    return scale * q_x * k_z.transpose();
}

Matrix aggregate(const Matrix& s_z, const Matrix& v_z) {
    require(s_z.cols() == v_z.rows(), "aggregate: shapes not conformable");
    return s_z * v_z;
}

void qkv_transform(const Matrix& normed, const LayerParams& lp, int n_queries,
                   Matrix* q, Matrix* k, Matrix* v) {
    require(normed.cols() == lp.w_q.rows(),
            "qkv_transform: token width must equal D");
    require(n_queries <= normed.rows(), "qkv_transform: too many query rows");
    // Prompt query rows are never computed.
    *q = (normed.topRows(n_queries) * lp.w_q).rowwise() + lp.b_q.transpose();
    *k = (normed * lp.w_k).rowwise() + lp.b_k.transpose();
    *v = (normed * lp.w_v).rowwise() + lp.b_v.transpose();
}

Matrix layer_forward(const Matrix& x, const Matrix& p, const LayerParams& lp,
                     double ln_eps, bool ln_bypass_prompts,
                     LayerCache* cache, AttentionTrace* trace) {
    const Eigen::Index n = x.rows();
    const Eigen::Index m = p.rows();
    const int dim = lp.dim();
    const int heads = lp.heads;
    const int d = lp.head_dim();
    require(x.cols() == dim && p.cols() == dim,
            "layer_forward: token width must equal D");
    require(dim % heads == 0, "layer_forward: D must be divisible by H");

    Matrix z(n + m, dim);
    z << x, p;
    auto [zn, ln1_stats] = layer_norm(z, lp.ln1_alpha, lp.ln1_beta, ln_eps);
    if (ln_bypass_prompts) zn.bottomRows(m) = p;

    Matrix q_x, k_z, v_z;
    qkv_transform(zn, lp, static_cast<int>(n), &q_x, &k_z, &v_z);

    Matrix f(n, dim);
    std::vector<Matrix> s_all(heads);
    if (trace) trace->heads.resize(heads);
    for (int h = 0; h < heads; ++h) {
        const auto qh = q_x.middleCols(h * d, d);
        const auto kh = k_z.middleCols(h * d, d);
        const auto vh = v_z.middleCols(h * d, d);
        Matrix a = affinity(qh, kh);
        Matrix s = softmax_rows(a);
        f.middleCols(h * d, d) = aggregate(s, vh);
        if (trace) {
            HeadTrace& ht = (*trace).heads[h];
            ht.q_x = qh;
            ht.k_z = kh;
            ht.v_z = vh;
            ht.a_z = a;
            ht.s_x = s.leftCols(n);
            ht.s_p = s.rightCols(m);
        }
        s_all[h] = std::move(s);
    }

    Matrix y = x + f;
    auto [yn, ln2_stats] = layer_norm(y, lp.ln2_alpha, lp.ln2_beta, ln_eps);
    Matrix h_pre = (yn * lp.mlp_w1).rowwise() + lp.mlp_b1.transpose();
    Matrix h_act = gelu(h_pre);
    Matrix out =
        y + ((h_act * lp.mlp_w2).rowwise() + lp.mlp_b2.transpose());

    if (trace) {
        trace->f_z = f;
        trace->prompt_stats = row_stats(p, ln_eps);
    }
    if (cache) {
        cache->x = x;
        cache->p = p;
        cache->bypass = ln_bypass_prompts;
        cache->zn = std::move(zn);
        cache->ln1_stats = std::move(ln1_stats);
        cache->q_x = std::move(q_x);
        cache->k_z = std::move(k_z);
        cache->v_z = std::move(v_z);
        cache->s = std::move(s_all);
        cache->f = std::move(f);
        cache->y = std::move(y);
        cache->yn = std::move(yn);
        cache->ln2_stats = std::move(ln2_stats);
        cache->h_pre = std::move(h_pre);
        cache->h_act = std::move(h_act);
    }
    return out;
}

std::pair<Matrix, Matrix> layer_backward(const LayerParams& lp,
                                         const LayerCache& cache,
                                         const Matrix& d_out) {
    const Eigen::Index n = cache.x.rows();
    const Eigen::Index m = cache.p.rows();
    const int dim = lp.dim();
    const int heads = lp.heads;
    const int d = lp.head_dim();
    require(d_out.rows() == n && d_out.cols() == dim,
            "layer_backward: gradient shape mismatch");

    // MLP + second residual.
    Matrix d_hact = d_out * lp.mlp_w2.transpose();
    Matrix d_hpre = d_hact.array() * gelu_grad(cache.h_pre).array();
    Matrix d_yn = d_hpre * lp.mlp_w1.transpose();
    Matrix d_y =
        d_out + layer_norm_backward(cache.y, cache.ln2_stats, lp.ln2_alpha, d_yn);

    // Attention: d_y flows into F and into the residual X branch.
    Matrix d_qx = Matrix::Zero(n, dim);
    Matrix d_kz = Matrix::Zero(n + m, dim);
    Matrix d_vz = Matrix::Zero(n + m, dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (int h = 0; h < heads; ++h) {
        const auto d_fh = d_y.middleCols(h * d, d);
        const Matrix& s = cache.s[h];
        const auto vh = cache.v_z.middleCols(h * d, d);
        const auto kh = cache.k_z.middleCols(h * d, d);
        const auto qh = cache.q_x.middleCols(h * d, d);
        Matrix d_s = d_fh * vh.transpose();
        d_vz.middleCols(h * d, d) = s.transpose() * d_fh;
        // Softmax backward, row-wise.
        Vector dot = (d_s.array() * s.array()).rowwise().sum();
        Matrix d_a = s.array() * (d_s.colwise() - dot).array();
        d_qx.middleCols(h * d, d) = scale * d_a * kh;
        d_kz.middleCols(h * d, d) = scale * d_a.transpose() * qh;
    }

    // QKV backward into the normalized tokens. Prompt query rows were never
    // computed, so only the image rows receive the query contribution.
    Matrix d_zn = d_kz * lp.w_k.transpose() + d_vz * lp.w_v.transpose();
    d_zn.topRows(n) += d_qx * lp.w_q.transpose();

    // LN1 backward. The two row blocks normalize independently, and in bypass
    // mode the prompt rows are an identity map.
    Matrix z(n + m, dim);
    z << cache.x, cache.p;
    RowStats img_stats{cache.ln1_stats.mean.head(n), cache.ln1_stats.std.head(n)};
    Matrix d_x = layer_norm_backward(cache.x, img_stats, lp.ln1_alpha,
                                     d_zn.topRows(n));
    Matrix d_p;
    if (cache.bypass) {
        d_p = d_zn.bottomRows(m);
    } else {
        RowStats pr_stats{cache.ln1_stats.mean.tail(m),
                          cache.ln1_stats.std.tail(m)};
        d_p = layer_norm_backward(cache.p, pr_stats, lp.ln1_alpha,
                                  d_zn.bottomRows(m));
    }
    d_x += d_y;  // first residual
    return {std::move(d_x), std::move(d_p)};
}

Matrix patchify(const Vector& image, int image_size, int patch_size) {
    require(image.size() == image_size * image_size,
            "patchify: image pixel count mismatch");
    require(image_size % patch_size == 0,
            "patchify: image size must be divisible by patch size");
    const int per_side = image_size / patch_size;
    const int patch_dim = patch_size * patch_size;
    Matrix patches(per_side * per_side, patch_dim);
    for (int pi = 0; pi < per_side; ++pi) {
        for (int pj = 0; pj < per_side; ++pj) {
            for (int r = 0; r < patch_size; ++r) {
                for (int c = 0; c < patch_size; ++c) {
                    patches(pi * per_side + pj, r * patch_size + c) =
                        image[(pi * patch_size + r) * image_size +
                              pj * patch_size + c];
                }
            }
        }
    }
    return patches;
}

Matrix BackboneModel::tokenize(const Vector& image) const {
    Matrix patches = patchify(image, image_size, patch_size);
    Matrix tokens(1 + patches.rows(), dim());
    tokens.row(0) = class_token.transpose();
    tokens.bottomRows(patches.rows()) = patches * patch_embedding;
    return tokens;
}

namespace {

Matrix random_orthogonal(int n, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = gauss(rng);
    Eigen::HouseholderQR<Matrix> qr(a);
    Matrix q = qr.householderQ();
    // Fix the sign convention so the result is deterministic.
    Vector diag = qr.matrixQR().diagonal();
    for (int j = 0; j < n; ++j)
        if (diag[j] < 0) q.col(j) = -q.col(j);
    return q;
}

Matrix random_gaussian(int rows, int cols, double stddev,
                       std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, stddev);
    Matrix a(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) a(i, j) = gauss(rng);
    return a;
}

Vector random_gaussian_vec(int n, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, stddev);
    Vector v(n);
    for (int i = 0; i < n; ++i) v[i] = gauss(rng);
    return v;
}

}  // namespace

BackboneModel make_model(const ModelSpec& spec, std::mt19937_64& rng) {
    require(spec.dim % spec.heads == 0, "make_model: D must be divisible by H");
    require(spec.image_size % spec.patch_size == 0,
            "make_model: image size must be divisible by patch size");
    BackboneModel model;
    model.image_size = spec.image_size;
    model.patch_size = spec.patch_size;
    model.ln_eps = spec.ln_eps;
    const int patch_dim = spec.patch_size * spec.patch_size;
    const int dff = 4 * spec.dim;
    model.patch_embedding = random_gaussian(
        patch_dim, spec.dim, 1.0 / std::sqrt(patch_dim), rng);
    // A large class token (or large LN shifts / qkv biases below) injects an
    // input-independent component into every embedding; heads then compete
    // through that shared direction instead of class content, which buries
    // the class-incremental signal. Keep the constant sources small.
    model.class_token = random_gaussian_vec(spec.dim, 0.1, rng);
    std::uniform_real_distribution<double> alpha_dist(0.8, 1.2);
    for (int l = 0; l < spec.layers; ++l) {
        LayerParams lp;
        lp.heads = spec.heads;
        lp.w_q = random_orthogonal(spec.dim, rng);
        lp.w_k = random_orthogonal(spec.dim, rng);
        lp.w_v = random_orthogonal(spec.dim, rng);
        lp.b_q = random_gaussian_vec(spec.dim, 0.02, rng);
        lp.b_k = random_gaussian_vec(spec.dim, 0.02, rng);
        lp.b_v = random_gaussian_vec(spec.dim, 0.01, rng);
        lp.ln1_alpha = Vector(spec.dim);
        lp.ln2_alpha = Vector(spec.dim);
        for (int i = 0; i < spec.dim; ++i) lp.ln1_alpha[i] = alpha_dist(rng);
        lp.ln1_beta = random_gaussian_vec(spec.dim, 0.02, rng);
        for (int i = 0; i < spec.dim; ++i) lp.ln2_alpha[i] = alpha_dist(rng);
        lp.ln2_beta = random_gaussian_vec(spec.dim, 0.02, rng);
        lp.mlp_w1 =
            random_gaussian(spec.dim, dff, 1.0 / std::sqrt(spec.dim), rng);
        lp.mlp_b1 = Vector::Zero(dff);
        lp.mlp_w2 =
            random_gaussian(dff, spec.dim, 1.0 / std::sqrt(dff), rng);
        lp.mlp_b2 = Vector::Zero(spec.dim);
        model.layers.push_back(std::move(lp));
        model.prompts.push_back(
            random_gaussian(spec.prompts, spec.dim, 0.1, rng));
    }
    return model;
}

namespace {

void hash_matrix(std::uint64_t& h, const Matrix& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        std::uint64_t bits;
        double v = m.data()[i];
        std::memcpy(&bits, &v, sizeof(bits));
        h = splitmix64(h ^ bits);
    }
}

void hash_vector(std::uint64_t& h, const Vector& v) {
    hash_matrix(h, Matrix(v));
}

}  // namespace

std::uint64_t backbone_hash(const BackboneModel& model) {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL;
    hash_matrix(h, model.patch_embedding);
    hash_vector(h, model.class_token);
    for (const auto& lp : model.layers) {
        hash_matrix(h, lp.w_q);
        hash_matrix(h, lp.w_k);
        hash_matrix(h, lp.w_v);
        hash_vector(h, lp.b_q);
        hash_vector(h, lp.b_k);
        hash_vector(h, lp.b_v);
        hash_vector(h, lp.ln1_alpha);
        hash_vector(h, lp.ln1_beta);
        hash_vector(h, lp.ln2_alpha);
        hash_vector(h, lp.ln2_beta);
        hash_matrix(h, lp.mlp_w1);
        hash_vector(h, lp.mlp_b1);
        hash_matrix(h, lp.mlp_w2);
        hash_vector(h, lp.mlp_b2);
    }
    return h;
}

Vector model_forward(const BackboneModel& model, const Matrix& tokens,
                     ForwardCache* cache, std::vector<AttentionTrace>* traces) {
    require(!model.task_heads.empty(), "model_forward: no classifier heads");
    const auto num_layers = model.layers.size();
    if (cache) cache->layers.resize(num_layers);
    if (traces) traces->resize(num_layers);
    Matrix x = tokens;
    for (std::size_t l = 0; l < num_layers; ++l) {
        x = layer_forward(x, model.prompts[l], model.layers[l], model.ln_eps,
                          model.ln_bypass_prompts,
                          cache ? &cache->layers[l] : nullptr,
                          traces ? &(*traces)[l] : nullptr);
    }
    Vector embedding = x.row(0).transpose();
    Eigen::Index total = 0;
    for (const auto& head : model.task_heads) total += head.b.size();
    Vector logits(total);
    Eigen::Index off = 0;
    for (const auto& head : model.task_heads) {
        logits.segment(off, head.b.size()) =
            head.w.transpose() * embedding + head.b;
        off += head.b.size();
    }
    if (cache) {
        cache->embedding = embedding;
        cache->logits = logits;
    }
    return logits;
}

PromptGradients classification_gradients(
    const BackboneModel& model,
    const std::vector<std::pair<Matrix, int>>& batch, double tau,
    bool local_softmax, std::vector<Matrix>* d_tokens) {
    const auto num_layers = model.layers.size();
    PromptGradients g;
    g.prompts.reserve(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l)
        g.prompts.push_back(Matrix::Zero(model.prompts[l].rows(),
                                         model.prompts[l].cols()));
    const ClassifierHead& current = model.task_heads.back();
    g.head_w = Matrix::Zero(current.w.rows(), current.w.cols());
    g.head_b = Vector::Zero(current.b.size());
    if (d_tokens) d_tokens->clear();

    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    for (const auto& [tokens, target] : batch) {
        ForwardCache cache;
        Vector all_logits = model_forward(model, tokens, &cache, nullptr);
        const Eigen::Index cur_classes = current.b.size();
        const Eigen::Index cur_off = all_logits.size() - cur_classes;
        Vector logits = local_softmax
                            ? Vector(all_logits.segment(cur_off, cur_classes))
                            : all_logits;
        require(target >= 0 && target < logits.size(),
                "classification_gradients: label outside logit range");
        Vector scaled = tau * logits;
        double mx = scaled.maxCoeff();
        double lse = mx + std::log((scaled.array() - mx).exp().sum());
        require(std::isfinite(lse),
                "classification_gradients: non-finite loss");
        g.loss += (lse - scaled[target]) * inv_batch;

        Vector d_logits = (scaled.array() - lse).exp();
        d_logits[target] -= 1.0;
        d_logits *= tau * inv_batch;

        Vector d_embedding = Vector::Zero(model.dim());
        if (local_softmax) {
            g.head_w += cache.embedding * d_logits.transpose();
            g.head_b += d_logits;
            d_embedding = current.w * d_logits;
        } else {
            g.head_w += cache.embedding *
                        d_logits.segment(cur_off, cur_classes).transpose();
            g.head_b += d_logits.segment(cur_off, cur_classes);
            Eigen::Index off = 0;
            for (const auto& head : model.task_heads) {
                d_embedding += head.w * d_logits.segment(off, head.b.size());
                off += head.b.size();
            }
        }
        Matrix d_out = Matrix::Zero(tokens.rows(), model.dim());
        d_out.row(0) = d_embedding.transpose();
        for (std::size_t l = num_layers; l-- > 0;) {
            auto [d_x, d_p] =
                layer_backward(model.layers[l], cache.layers[l], d_out);
            g.prompts[l] += d_p;
            d_out = std::move(d_x);
        }
        if (d_tokens) d_tokens->push_back(std::move(d_out));
    }
    return g;
}

std::vector<ProjectionInputs> collect_projection_inputs(
    const BackboneModel& model, const std::vector<Matrix>& token_batch) {
    const auto num_layers = model.layers.size();
    const int n = model.num_tokens();
    const int m = model.num_prompts();
    const int dim = model.dim();
    const auto samples = static_cast<Eigen::Index>(token_batch.size());

    std::vector<ProjectionInputs> out(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) {
        const int h = model.layers[l].heads;
        out[l].j1 = Matrix(samples * h * n, dim);
        out[l].j2 = Matrix(samples * h * n, m);
        out[l].x_in = Matrix(samples * n, dim);
    }
    for (Eigen::Index i = 0; i < samples; ++i) {
        ForwardCache cache;
        std::vector<AttentionTrace> traces;
        model_forward(model, token_batch[i], &cache, &traces);
        for (std::size_t l = 0; l < num_layers; ++l) {
            const LayerParams& lp = model.layers[l];
            const int d = lp.head_dim();
            for (int h = 0; h < lp.heads; ++h) {
                const Eigen::Index row = (i * lp.heads + h) * n;
                const auto w_kh = lp.w_k.middleCols(h * d, d);
                out[l].j1.middleRows(row, n) =
                    traces[l].heads[h].q_x * w_kh.transpose();
                out[l].j2.middleRows(row, n) = traces[l].heads[h].s_p;
            }
            out[l].x_in.middleRows(i * n, n) = cache.layers[l].x;
        }
    }
    return out;
}

}  // namespace nsp
