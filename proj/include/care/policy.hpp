#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "care/core.hpp"

namespace care {

struct Dims {
    int vocab = 0;
    int embed = 32;
    int hidden = 64;

    bool operator==(const Dims&) const = default;
};

/// Parameter blocks of the policy network.
///
///   x = [mean(E[observation]); mean(E[generated prefix]); E[last token]]
///   h = tanh(W1 x + b1),  q = Wq h
///   z = W2 h + b2, plus
///     inside <think>: content t     += (think_prior + s_cand) * [t is a candidate] + s_obs_think * [t observed]
///                     </think>      += (close_prior + s_close) * [previous token is a candidate]
///     after <answer>: letter j      += q . E[c_j] + (match_prior + s_match) * [conclusion == c_j]
///                                      + s_obs_answer * [c_j observed]
enum class Block : int { Embedding = 0, Hidden, HiddenBias, Output, OutputBias, Query, Scalars };
inline constexpr int kNumBlocks = 7;
using BlockOrder = std::array<Block, kNumBlocks>;

enum Scalar : int {
    kScalarMatch = 0,
    kScalarObservedAnswer,
    kScalarCandidateThink,
    kScalarObservedThink,
    kScalarCloseAfterCandidate,
};
inline constexpr int kNumScalars = 5;

constexpr BlockOrder kCanonicalOrder = {Block::Embedding, Block::Hidden, Block::HiddenBias, Block::Output,
                                        Block::OutputBias, Block::Query, Block::Scalars};

class ParamLayout {
public:
    ParamLayout() = default;
    explicit ParamLayout(Dims dims, BlockOrder order = kCanonicalOrder);

    const Dims& dims() const { return dims_; }
    const BlockOrder& order() const { return order_; }
    std::size_t offset(Block b) const { return offsets_[static_cast<std::size_t>(b)]; }
    std::size_t size(Block b) const { return sizes_[static_cast<std::size_t>(b)]; }
    std::size_t total() const { return total_; }

    bool operator==(const ParamLayout&) const = default;

private:
    Dims dims_{};
    BlockOrder order_ = kCanonicalOrder;
    std::array<std::size_t, kNumBlocks> offsets_{};
    std::array<std::size_t, kNumBlocks> sizes_{};
    std::size_t total_ = 0;
};

/// Flat float64 parameter vector with typed views. Also used for gradients and
/// optimiser moments (same layout).
class PolicyParams {
public:
    PolicyParams() = default;
    explicit PolicyParams(Dims dims, BlockOrder order = kCanonicalOrder);

    const Dims& dims() const { return layout_.dims(); }
    const ParamLayout& layout() const { return layout_; }
    std::size_t size() const { return values_.size(); }

    std::span<double> flat() { return values_; }
    std::span<const double> flat() const { return values_; }
    std::span<double> block(Block b) { return flat().subspan(layout_.offset(b), layout_.size(b)); }
    std::span<const double> block(Block b) const { return flat().subspan(layout_.offset(b), layout_.size(b)); }

    std::span<double> embedding(Token t) { return block(Block::Embedding).subspan(row(t, dims().embed), dims().embed); }
    std::span<const double> embedding(Token t) const {
        return block(Block::Embedding).subspan(row(t, dims().embed), dims().embed);
    }
    /// Row j of W1 (length 3*embed).
    std::span<double> hidden_row(int j) { return block(Block::Hidden).subspan(row(j, 3 * dims().embed), 3 * dims().embed); }
    std::span<const double> hidden_row(int j) const {
        return block(Block::Hidden).subspan(row(j, 3 * dims().embed), 3 * dims().embed);
    }
    /// Row t of W2 (length hidden).
    std::span<double> output_row(Token t) { return block(Block::Output).subspan(row(t, dims().hidden), dims().hidden); }
    std::span<const double> output_row(Token t) const {
        return block(Block::Output).subspan(row(t, dims().hidden), dims().hidden);
    }
    /// Row k of Wq (length hidden).
    std::span<double> query_row(int k) { return block(Block::Query).subspan(row(k, dims().hidden), dims().hidden); }
    std::span<const double> query_row(int k) const {
        return block(Block::Query).subspan(row(k, dims().hidden), dims().hidden);
    }
    double& scalar(Scalar s) { return block(Block::Scalars)[static_cast<std::size_t>(s)]; }
    double scalar(Scalar s) const { return block(Block::Scalars)[static_cast<std::size_t>(s)]; }

    void fill(double v);
    bool all_finite() const;

    /// Same parameter values stored under another block order.
    PolicyParams relayout(BlockOrder order) const;

    bool operator==(const PolicyParams&) const = default;

private:
    static std::size_t row(int i, int width) { return static_cast<std::size_t>(i) * static_cast<std::size_t>(width); }

    ParamLayout layout_;
    std::vector<double> values_;
};

/// Fixed multipliers applied to each raw parameter block in the forward pass
/// (effective = gain * raw), indexed by Block. They give O(1) activations from
/// the small uniform initialisation.
using BlockGains = std::array<double, kNumBlocks>;
inline constexpr BlockGains kUnitGains = {1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0};
inline constexpr BlockGains kDefaultGains = {20.0, 3.0, 1.0, 2.0, 1.0, 1.0, 20.0};

/// Architecture constants and decoding grammar shared by every policy call.
struct ModelSpec {
    Vocabulary vocab;
    Dims dims;
    BlockGains gains = kDefaultGains;
    // fixed offsets standing in for a pretrained model's habits: mention the
    // options, stop after naming one, answer with the one named last
    double think_prior = 3.0;
    double close_prior = 5.0;
    double match_prior = 4.0;
    bool constrained = true;
    int max_reason_len = 24;
    int max_answer_len = 1;

    static ModelSpec from_config(const Config& cfg, const Vocabulary& vocab);
    int max_length() const { return max_reason_len + max_answer_len + 4; }
};

PolicyParams init_params(std::uint64_t seed, Dims dims, double scale = 0.05);

struct TokenDistribution {
    std::vector<double> logits;     // -inf where the grammar forbids the token
    std::vector<double> log_probs;  // log-softmax over allowed tokens
};

/// Next-token distribution after `prefix` (the generated part of the response).
TokenDistribution forward_logits(const ModelSpec& model, const PolicyParams& params, const Episode& ep,
                                 std::span<const Token> prefix);

/// Autoregressive sampling; temperature 0 is greedy (ties to the lowest id).
/// Stops at </answer>, at <end> (unconstrained grammar) or at the length limit.
Trajectory sample_trajectory(const ModelSpec& model, const PolicyParams& params, const Episode& ep, Rng& rng,
                             double temperature);

/// Samples a continuation of `prefix` (used to regenerate an answer block).
std::vector<Token> sample_continuation(const ModelSpec& model, const PolicyParams& params, const Episode& ep,
                                       std::span<const Token> prefix, Rng& rng, double temperature);

/// Teacher-forced per-token log-probabilities of `tokens`.
std::vector<double> logprob_of(const ModelSpec& model, const PolicyParams& params, const Episode& ep,
                               std::span<const Token> tokens);

/// Mean per-token probability (not log-probability) of `answer` given
/// `prefix`, teacher-forced. Throws on an empty answer.
double answer_likelihood(const ModelSpec& model, const PolicyParams& params, const Episode& ep,
                         std::span<const Token> prefix, std::span<const Token> answer);

/// Same quantity computed by growing the prefix one token at a time through
/// forward_logits.
double answer_likelihood_streaming(const ModelSpec& model, const PolicyParams& params, const Episode& ep,
                                   std::span<const Token> prefix, std::span<const Token> answer);

/// Parse the answer letter when the stream is exactly
/// <think> ... </think> <answer> letter </answer>.
std::optional<int> parse_answer(std::span<const Token> tokens, const Vocabulary& vocab);

/// Last content token inside the think block, or -1.
Token think_conclusion(std::span<const Token> tokens, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Objective and gradients

enum class KLMode { None, Full, HighAccOnly, Separate };

struct KLSpec {
    KLMode mode = KLMode::None;
    double beta = 0.0;
    double beta_reason = 0.0;
    double beta_answer = 0.0;
    /// Per-trajectory penalty mask; empty means every trajectory.
    std::vector<bool> mask;
    const PolicyParams* reference = nullptr;
};

struct SurrogateResult {
    double objective = 0.0;  // clipped surrogate minus KL penalty
    double surrogate = 0.0;
    double kl = 0.0;         // mean per-token KL over penalised tokens
    double kl_penalty = 0.0;
    double clip_fraction = 0.0;
    PolicyParams gradient;   // d objective / d theta
};

/// Group- and token-averaged clipped surrogate for one episode's group and its
/// exact gradient. KL estimator per token: r - log r - 1, r = pi_ref / pi_theta.
SurrogateResult surrogate_grad(const ModelSpec& model, const PolicyParams& theta, const Episode& ep,
                               std::span<const Trajectory> group, std::span<const double> advantages,
                               double clip_eps, const KLSpec& kl);

struct LikelihoodResult {
    double loglik = 0.0;   // sum of token log-probabilities
    PolicyParams gradient; // d loglik / d theta
};

/// Teacher-forced log-likelihood of a whole response and its gradient.
LikelihoodResult sequence_loglik_grad(const ModelSpec& model, const PolicyParams& theta, const Episode& ep,
                                      std::span<const Token> tokens);

/// phi <- alpha * phi + (1 - alpha) * theta, elementwise.
void ema_update(PolicyParams& phi, const PolicyParams& theta, double alpha);

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
    Dims dims;
    std::uint64_t step = 0;
    Variant variant = Variant::GRPO;
    PolicyParams theta;
    PolicyParams phi;
};

/// Header: "CARECKPT", u32 version, u32 vocab, u32 embed, u32 hidden,
/// u32 scalars, u64 step, u32 variant, u64 count; then theta and phi as
/// little-endian float64 in canonical block order.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace care
