#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "apd/autodiff.hpp"
#include "apd/errors.hpp"
#include "apd/hash.hpp"
#include "apd/rng.hpp"
#include "apd/tokenizer.hpp"

namespace apd {

// Architecture of the toy CLIP-like model. Defaults run the full protocol
// in minutes on a CPU.
struct EncoderConfig {
    int embed_dim = 64;
    int image_layers = 6;
    int text_layers = 4;
    int image_width = 64;
    int text_width = 64;
    int image_heads = 4;
    int text_heads = 4;
    int patch_size = 8;
    int image_resolution = 32;
    int channels = 3;
    int context_length = 16;
    int mlp_ratio = 4;
    double logit_scale = 100.0;

    int num_patches() const {
        return (image_resolution / patch_size) * (image_resolution / patch_size);
    }
    int pixel_dim() const { return channels * image_resolution * image_resolution; }

    void validate() const {
        if (embed_dim <= 0 || image_layers <= 0 || text_layers <= 0 || image_width <= 0 ||
            text_width <= 0 || patch_size <= 0 || image_resolution <= 0 ||
            context_length <= 0 || channels <= 0 || mlp_ratio <= 0)
            throw config_error("encoder config: all dimensions must be positive");
        if (logit_scale <= 0.0) throw config_error("encoder config: logit_scale must be > 0");
        if (image_resolution % patch_size != 0)
            throw config_error("encoder config: resolution not divisible by patch size");
        if (image_width % image_heads != 0 || text_width % text_heads != 0)
            throw config_error("encoder config: width not divisible by head count");
    }
};

// One pre-LN transformer block. All tensors are frozen constants.
struct Block {
    ad::Var ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    std::vector<ad::Var> wq, wk, wv, wo;  // per head: (w x dh), (w x dh), (w x dh), (dh x w)
    ad::Var attn_bias;                    // 1 x w
    ad::Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct Tower {
    std::vector<Block> blocks;
    ad::Var ln_final_gamma, ln_final_beta;
    ad::Var proj;  // width x embed_dim
    // image tower only:
    ad::Var patch_embed;  // patch_dim x width
    ad::Var cls_token;    // 1 x width
    // text tower only:
    ad::Var token_embed;  // vocab x width
    ad::Var pos_embed;    // sequence x width (both towers)
};

namespace detail {

inline ad::Var rand_const(Eigen::Index r, Eigen::Index c, double stddev,
                          std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = dist(rng);
    return ad::constant(std::move(m));
}

inline Block random_block(int width, int heads, int mlp_ratio, std::mt19937_64& rng) {
    Block b;
    const int dh = width / heads;
    const double w_std = 1.0 / std::sqrt(static_cast<double>(width));
    b.ln1_gamma = ad::constant(Eigen::MatrixXd::Ones(1, width));
    b.ln1_beta = ad::constant(Eigen::MatrixXd::Zero(1, width));
    b.ln2_gamma = ad::constant(Eigen::MatrixXd::Ones(1, width));
    b.ln2_beta = ad::constant(Eigen::MatrixXd::Zero(1, width));
    for (int h = 0; h < heads; ++h) {
        b.wq.push_back(rand_const(width, dh, w_std, rng));
        b.wk.push_back(rand_const(width, dh, w_std, rng));
        b.wv.push_back(rand_const(width, dh, w_std, rng));
        b.wo.push_back(rand_const(dh, width, 1.0 / std::sqrt(static_cast<double>(dh)), rng));
    }
    b.attn_bias = ad::constant(Eigen::MatrixXd::Zero(1, width));
    b.mlp_w1 = rand_const(width, width * mlp_ratio, w_std, rng);
    b.mlp_b1 = ad::constant(Eigen::MatrixXd::Zero(1, width * mlp_ratio));
    b.mlp_w2 = rand_const(width * mlp_ratio, width,
                          1.0 / std::sqrt(static_cast<double>(width * mlp_ratio)), rng);
    b.mlp_b2 = ad::constant(Eigen::MatrixXd::Zero(1, width));
    return b;
}

inline ad::Var run_block(const Block& b, const ad::Var& x, int heads) {
    ad::Var xn = ad::layer_norm(x, b.ln1_gamma, b.ln1_beta);
    const double dh = static_cast<double>(b.wq[0]->value.cols());
    ad::Var attn;
    for (int h = 0; h < heads; ++h) {
        ad::Var q = ad::matmul(xn, b.wq[static_cast<std::size_t>(h)]);
        ad::Var k = ad::matmul(xn, b.wk[static_cast<std::size_t>(h)]);
        ad::Var v = ad::matmul(xn, b.wv[static_cast<std::size_t>(h)]);
        ad::Var scores = ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(dh));
        ad::Var out = ad::matmul(ad::matmul(ad::softmax_rows(scores), v),
                                 b.wo[static_cast<std::size_t>(h)]);
        attn = attn ? ad::add(attn, out) : out;
    }
    attn = ad::add_rowvec(attn, b.attn_bias);
    ad::Var y = ad::add(x, attn);
    ad::Var yn = ad::layer_norm(y, b.ln2_gamma, b.ln2_beta);
    ad::Var mlp = ad::matmul(ad::gelu(ad::add_rowvec(ad::matmul(yn, b.mlp_w1), b.mlp_b1)),
                             b.mlp_w2);
    mlp = ad::add_rowvec(mlp, b.mlp_b2);
    return ad::add(y, mlp);
}

}  // namespace detail

// Learnable per-layer prompt tokens, the only trainable state in the
// whole system. A unimodal set leaves one of the two lists empty.
struct PromptSet {
    std::vector<ad::Var> visual;   // each: length x image_width
    std::vector<ad::Var> textual;  // each: length x text_width
    int depth = 0;
    int length = 0;

    static PromptSet init(const EncoderConfig& cfg, int depth, int length, bool with_visual,
                          bool with_textual, std::uint64_t seed) {
        if (length < 1) throw config_error("prompt length must be >= 1");
        if (depth < 1 || depth > std::min(cfg.image_layers, cfg.text_layers))
            throw config_error("prompt depth must be in [1, min(image_layers, text_layers)]");
        if (!with_visual && !with_textual)
            throw config_error("prompt set must cover at least one modality");
        PromptSet p;
        p.depth = depth;
        p.length = length;
        auto rng = make_rng(seed, "prompt_init");
        std::normal_distribution<double> dist(0.0, 0.02);
        auto draw = [&](int width) {
            Eigen::MatrixXd m(length, width);
            for (Eigen::Index i = 0; i < m.rows(); ++i)
                for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = dist(rng);
            return ad::leaf(std::move(m));
        };
        if (with_visual)
            for (int l = 0; l < depth; ++l) p.visual.push_back(draw(cfg.image_width));
        if (with_textual)
            for (int l = 0; l < depth; ++l) p.textual.push_back(draw(cfg.text_width));
        return p;
    }

    std::vector<ad::Var> trainable() const {
        std::vector<ad::Var> all = visual;
        all.insert(all.end(), textual.begin(), textual.end());
        return all;
    }

    // Same values, constant nodes; used where no prompt gradient is needed.
    PromptSet detached() const {
        PromptSet p;
        p.depth = depth;
        p.length = length;
        for (const auto& v : visual) p.visual.push_back(ad::constant(v->value));
        for (const auto& v : textual) p.textual.push_back(ad::constant(v->value));
        return p;
    }

    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& v : visual) h = hash_matrix(v->value, h);
        for (const auto& v : textual) h = hash_matrix(v->value, h);
        return h;
    }

    void check_finite() const {
        for (const auto& v : trainable())
            if (!v->value.allFinite()) throw train_error("prompt set contains non-finite values");
    }
};

// Frozen image and text towers mapping both modalities into a joint
// embed_dim space. No training operation ever mutates these weights.
class BimodalEncoder {
public:
    BimodalEncoder(EncoderConfig cfg, int vocab_size, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        if (vocab_size < 2) throw config_error("vocab size must be >= 2");
        vocab_size_ = vocab_size;
        auto rng = make_rng(seed, "backbone_init");
        const int pd = cfg_.channels * cfg_.patch_size * cfg_.patch_size;
        image_.patch_embed =
            detail::rand_const(pd, cfg_.image_width, 1.0 / std::sqrt(static_cast<double>(pd)), rng);
        image_.cls_token = detail::rand_const(1, cfg_.image_width, 0.02, rng);
        image_.pos_embed = detail::rand_const(1 + cfg_.num_patches(), cfg_.image_width, 0.02, rng);
        for (int l = 0; l < cfg_.image_layers; ++l)
            image_.blocks.push_back(
                detail::random_block(cfg_.image_width, cfg_.image_heads, cfg_.mlp_ratio, rng));
        image_.ln_final_gamma = ad::constant(Eigen::MatrixXd::Ones(1, cfg_.image_width));
        image_.ln_final_beta = ad::constant(Eigen::MatrixXd::Zero(1, cfg_.image_width));
        image_.proj = detail::rand_const(cfg_.image_width, cfg_.embed_dim,
                                         1.0 / std::sqrt(static_cast<double>(cfg_.image_width)), rng);

        text_.token_embed = detail::rand_const(vocab_size, cfg_.text_width, 0.02, rng);
        text_.pos_embed = detail::rand_const(cfg_.context_length, cfg_.text_width, 0.02, rng);
        for (int l = 0; l < cfg_.text_layers; ++l)
            text_.blocks.push_back(
                detail::random_block(cfg_.text_width, cfg_.text_heads, cfg_.mlp_ratio, rng));
        text_.ln_final_gamma = ad::constant(Eigen::MatrixXd::Ones(1, cfg_.text_width));
        text_.ln_final_beta = ad::constant(Eigen::MatrixXd::Zero(1, cfg_.text_width));
        text_.proj = detail::rand_const(cfg_.text_width, cfg_.embed_dim,
                                        1.0 / std::sqrt(static_cast<double>(cfg_.text_width)), rng);
    }

    const EncoderConfig& config() const { return cfg_; }
    int vocab_size() const { return vocab_size_; }

    std::uint64_t parameter_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        auto tower = [&h](const Tower& t) {
            auto mat = [&h](const ad::Var& v) {
                if (v) h = hash_matrix(v->value, h);
            };
            mat(t.patch_embed);
            mat(t.cls_token);
            mat(t.token_embed);
            mat(t.pos_embed);
            for (const auto& b : t.blocks) {
                mat(b.ln1_gamma), mat(b.ln1_beta), mat(b.ln2_gamma), mat(b.ln2_beta);
                for (const auto& v : b.wq) mat(v);
                for (const auto& v : b.wk) mat(v);
                for (const auto& v : b.wv) mat(v);
                for (const auto& v : b.wo) mat(v);
                mat(b.attn_bias);
                mat(b.mlp_w1), mat(b.mlp_b1), mat(b.mlp_w2), mat(b.mlp_b2);
            }
            mat(t.ln_final_gamma), mat(t.ln_final_beta), mat(t.proj);
        };
        tower(image_);
        tower(text_);
        return h;
    }

    // pixels: (B x channels*res*res), values in [0,1]. Returns unit-normalized
    // (B x d) embeddings, differentiable w.r.t. pixels and visual prompts.
    ad::Var encode_image(const ad::Var& pixels, const PromptSet& prompts) const {
        if (pixels->value.cols() != cfg_.pixel_dim())
            throw config_error("encode_image: pixel dimension does not match model resolution");
        if (!pixels->value.allFinite()) throw input_error("encode_image: non-finite input");
        check_prompt_widths(prompts);
        const Eigen::Index batch = pixels->value.rows();
        const Eigen::Index base_tokens = 1 + cfg_.num_patches();
        std::vector<ad::Var> rows;
        rows.reserve(static_cast<std::size_t>(batch));
        for (Eigen::Index i = 0; i < batch; ++i) {
            ad::Var px = ad::slice_rows(pixels, i, 1);
            ad::Var patches = ad::extract_patches(px, cfg_.channels, cfg_.image_resolution,
                                                  cfg_.image_resolution, cfg_.patch_size);
            ad::Var tokens = ad::matmul(patches, image_.patch_embed);
            ad::Var x = ad::add(ad::concat_rows({image_.cls_token, tokens}), image_.pos_embed);
            rows.push_back(run_tower(image_, x, prompts.visual, cfg_.image_heads, base_tokens,
                                     prompts.depth));
        }
        return ad::l2_normalize_rows(ad::concat_rows(rows));
    }

    // token_batch: padded sequences of vocabulary ids. Returns unit-normalized
    // (B x d) embeddings, differentiable w.r.t. textual prompts.
    ad::Var encode_text(const std::vector<std::vector<int>>& token_batch,
                        const PromptSet& prompts) const {
        check_prompt_widths(prompts);
        std::vector<ad::Var> rows;
        rows.reserve(token_batch.size());
        for (const auto& ids : token_batch) {
            if (static_cast<int>(ids.size()) != cfg_.context_length)
                throw input_error("encode_text: sequence length != context_length");
            Eigen::MatrixXd base(cfg_.context_length, cfg_.text_width);
            for (int t = 0; t < cfg_.context_length; ++t) {
                const int id = ids[static_cast<std::size_t>(t)];
                if (id < 0 || id >= vocab_size_)
                    throw input_error("encode_text: token id " + std::to_string(id) +
                                      " outside vocabulary");
                base.row(t) = text_.token_embed->value.row(id) + text_.pos_embed->value.row(t);
            }
            ad::Var x = ad::constant(std::move(base));
            // Pool over the real (non-pad) tokens so every word reaches the
            // embedding directly; pads sit at the tail of the sequence.
            Eigen::Index pool = 1;
            for (int t = 0; t < cfg_.context_length; ++t)
                if (ids[static_cast<std::size_t>(t)] != Tokenizer::kPadId)
                    pool = static_cast<Eigen::Index>(t) + 1;
            rows.push_back(run_tower(text_, x, prompts.textual, cfg_.text_heads,
                                     cfg_.context_length, prompts.depth, pool));
        }
        return ad::l2_normalize_rows(ad::concat_rows(rows));
    }

    // Scaled cosine similarities: logits[i][j] = logit_scale * <img_i, txt_j>.
    ad::Var compute_logits(const ad::Var& image_embeds, const ad::Var& text_embeds) const {
        if (image_embeds->value.cols() != cfg_.embed_dim ||
            text_embeds->value.cols() != cfg_.embed_dim)
            throw config_error("compute_logits: embedding dimension mismatch");
        return ad::scale(ad::matmul_nt(image_embeds, text_embeds), cfg_.logit_scale);
    }

private:
    // Deep prompting: the first prompted layer's tokens are appended at the
    // input; every later prompted layer replaces the prompt-position outputs
    // of the previous layer. Class/patch positions pass through unchanged.
    // Pools by averaging the first pool_count positions (all base positions
    // when pool_count <= 0), then projects into the shared embedding space.
    ad::Var run_tower(const Tower& tower, ad::Var x, const std::vector<ad::Var>& prompts,
                      int heads, Eigen::Index base_tokens, int depth,
                      Eigen::Index pool_count = 0) const {
        const bool prompted = !prompts.empty();
        if (prompted) x = ad::concat_rows({x, prompts[0]});
        for (std::size_t l = 0; l < tower.blocks.size(); ++l) {
            if (prompted && l > 0 && l < static_cast<std::size_t>(depth))
                x = ad::concat_rows({ad::slice_rows(x, 0, base_tokens), prompts[l]});
            x = detail::run_block(tower.blocks[l], x, heads);
        }
        x = ad::layer_norm(x, tower.ln_final_gamma, tower.ln_final_beta);
        const Eigen::Index n = pool_count > 0 ? pool_count : base_tokens;
        ad::Var mean = ad::matmul(
            ad::constant(Eigen::MatrixXd::Constant(1, n, 1.0 / static_cast<double>(n))),
            ad::slice_rows(x, 0, n));
        return ad::matmul(mean, tower.proj);
    }

    void check_prompt_widths(const PromptSet& prompts) const {
        for (const auto& v : prompts.visual)
            if (v->value.cols() != cfg_.image_width)
                throw config_error("visual prompt width does not match image encoder width");
        for (const auto& v : prompts.textual)
            if (v->value.cols() != cfg_.text_width)
                throw config_error("textual prompt width does not match text encoder width");
        const int max_depth = std::min(cfg_.image_layers, cfg_.text_layers);
        if (prompts.depth > max_depth)
            throw config_error("prompt depth exceeds encoder layer count");
    }

    EncoderConfig cfg_;
    int vocab_size_ = 0;
    Tower image_, text_;
};

// Numerically stabilized row-wise softmax on plain values.
inline Eigen::MatrixXd softmax_probs(const Eigen::MatrixXd& logits) {
    if (!logits.allFinite()) throw input_error("softmax_probs: non-finite logits");
    Eigen::MatrixXd p = logits;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        const double m = p.row(i).maxCoeff();
        p.row(i) = (p.row(i).array() - m).exp();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

// Argmax per row; ties resolved to the lowest class index.
inline std::vector<int> argmax_rows(const Eigen::MatrixXd& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        int best = 0;
        for (Eigen::Index j = 1; j < logits.cols(); ++j)
            if (logits(i, j) > logits(i, best)) best = static_cast<int>(j);
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

struct Classification {
    Eigen::MatrixXd logits;
    std::vector<int> predictions;
};

inline Classification classify(const Eigen::MatrixXd& images, const PromptSet& prompts,
                               const std::vector<std::vector<int>>& class_prompts,
                               const BimodalEncoder& model) {
    PromptSet frozen = prompts.detached();
    ad::Var img = model.encode_image(ad::constant(images), frozen);
    ad::Var txt = model.encode_text(class_prompts, frozen);
    ad::Var logits = model.compute_logits(img, txt);
    return {logits->value, argmax_rows(logits->value)};
}

}  // namespace apd
