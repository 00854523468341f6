#include "care/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace care {

static_assert(std::endian::native == std::endian::little, "checkpoint encoding assumes a little-endian host");

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

std::size_t block_size_of(Block b, const Dims& d) {
    const auto v = static_cast<std::size_t>(d.vocab);
    const auto e = static_cast<std::size_t>(d.embed);
    const auto h = static_cast<std::size_t>(d.hidden);
    switch (b) {
        case Block::Embedding: return v * e;
        case Block::Hidden: return h * 3 * e;
        case Block::HiddenBias: return h;
        case Block::Output: return v * h;
        case Block::OutputBias: return v;
        case Block::Query: return e * h;
        case Block::Scalars: return kNumScalars;
    }
    return 0;
}

PolicyParams effective_params(const ModelSpec& model, const PolicyParams& raw) {
    PolicyParams eff = raw;
    for (int b = 0; b < kNumBlocks; ++b) {
        const double g = model.gains[static_cast<std::size_t>(b)];
        if (g == 1.0) continue;
        for (double& v : eff.block(static_cast<Block>(b))) v *= g;
    }
    return eff;
}

/// Episode-level quantities reused at every position.
struct EpisodeContext {
    std::vector<double> obs_pool;
    std::vector<std::uint8_t> observed;   // by token
    std::vector<std::uint8_t> candidate;  // by token
    std::array<bool, kNumCandidates> cand_observed{};

    EpisodeContext(const ModelSpec& model, const PolicyParams& p, const Episode& ep) {
        const int d = model.dims.embed;
        const int v = model.dims.vocab;
        obs_pool.assign(static_cast<std::size_t>(d), 0.0);
        observed.assign(static_cast<std::size_t>(v), 0);
        candidate.assign(static_cast<std::size_t>(v), 0);
        for (Token t : ep.observation) {
            if (t < 0 || t >= v) throw std::out_of_range("observation token id out of range");
            axpy(1.0, p.embedding(t), obs_pool);
            observed[static_cast<std::size_t>(t)] = 1;
        }
        if (!ep.observation.empty()) {
            for (double& x : obs_pool) x /= static_cast<double>(ep.observation.size());
        }
        for (std::size_t j = 0; j < kNumCandidates; ++j) {
            Token c = ep.candidates[j];
            if (c < 0 || c >= v) throw std::out_of_range("candidate token id out of range");
            candidate[static_cast<std::size_t>(c)] = 1;
            cand_observed[j] = observed[static_cast<std::size_t>(c)] != 0;
        }
    }
};

/// Template/grammar state after a prefix.
struct PrefixState {
    int length = 0;
    bool think_open = false;
    bool think_closed = false;
    bool answer_open = false;
    bool answer_closed = false;
    bool ended = false;
    int think_content = 0;
    int answer_content = 0;
    Token conclusion = -1;
    Token last = Vocabulary::kQuestion;

    bool in_think() const { return think_open && !think_closed; }
    bool in_answer() const { return answer_open && !answer_closed; }

    void push(Token t, const Vocabulary& vocab) {
        ++length;
        last = t;
        if (t == Vocabulary::kThinkOpen) {
            think_open = true;
        } else if (t == Vocabulary::kThinkClose) {
            if (in_think()) think_closed = true;
        } else if (t == Vocabulary::kAnswerOpen) {
            answer_open = true;
        } else if (t == Vocabulary::kAnswerClose) {
            if (answer_open) answer_closed = true;
        } else if (t == Vocabulary::kEnd) {
            ended = true;
        } else if (in_think() && vocab.is_content(t)) {
            ++think_content;
            conclusion = t;
        } else if (in_answer() && vocab.is_letter(t)) {
            ++answer_content;
        }
    }

    bool done(const ModelSpec& model) const {
        if (model.constrained) return answer_closed;
        return answer_closed || ended || length >= model.max_length();
    }

    void allowed(const ModelSpec& model, std::vector<Token>& out) const {
        out.clear();
        const auto& vocab = model.vocab;
        if (!model.constrained) {
            for (Token t = 0; t < vocab.size(); ++t) out.push_back(t);
            return;
        }
        if (!think_open) {
            out.push_back(Vocabulary::kThinkOpen);
        } else if (in_think()) {
            out.push_back(Vocabulary::kThinkClose);
            if (think_content < model.max_reason_len) {
                for (Token t = 0; t < vocab.size(); ++t) {
                    if (vocab.is_content(t)) out.push_back(t);
                }
            }
        } else if (!answer_open) {
            out.push_back(Vocabulary::kAnswerOpen);
        } else if (in_answer()) {
            if (answer_content > 0) out.push_back(Vocabulary::kAnswerClose);
            if (answer_content < model.max_answer_len) {
                for (int j = 0; j < Vocabulary::kNumLetters; ++j) out.push_back(vocab.letter(j));
            }
            std::sort(out.begin(), out.end());
        }
    }
};

/// Network evaluation at one position.
struct StepEval {
    std::vector<double> x, h, q;
    std::vector<Token> allowed;
    std::vector<double> logits;     // aligned with allowed
    std::vector<double> log_probs;  // aligned with allowed
    bool think_aug = false;
    bool answer_aug = false;
    Token conclusion = -1;
    Token last = Vocabulary::kQuestion;
    int gen_count = 0;

    int index_of(Token t) const {
        auto it = std::lower_bound(allowed.begin(), allowed.end(), t);
        if (it == allowed.end() || *it != t) return -1;
        return static_cast<int>(it - allowed.begin());
    }
};

void evaluate_step(const ModelSpec& model, const PolicyParams& p, const Episode& ep, const EpisodeContext& ctx,
                   std::span<const double> gen_sum, const PrefixState& st, StepEval& out) {
    const int d = model.dims.embed;
    const int hdim = model.dims.hidden;
    const auto& vocab = model.vocab;

    out.gen_count = st.length;
    out.last = st.last;
    out.x.assign(static_cast<std::size_t>(3 * d), 0.0);
    std::copy(ctx.obs_pool.begin(), ctx.obs_pool.end(), out.x.begin());
    if (st.length > 0) {
        for (int k = 0; k < d; ++k) out.x[static_cast<std::size_t>(d + k)] = gen_sum[static_cast<std::size_t>(k)] / st.length;
    }
    auto last_emb = p.embedding(st.last);
    std::copy(last_emb.begin(), last_emb.end(), out.x.begin() + 2 * d);

    auto b1 = p.block(Block::HiddenBias);
    out.h.resize(static_cast<std::size_t>(hdim));
    for (int j = 0; j < hdim; ++j) out.h[static_cast<std::size_t>(j)] = std::tanh(b1[static_cast<std::size_t>(j)] + dot(p.hidden_row(j), out.x));

    out.think_aug = st.in_think();
    out.answer_aug = st.in_answer();
    out.conclusion = st.think_closed ? st.conclusion : -1;
    out.q.assign(static_cast<std::size_t>(d), 0.0);
    if (out.answer_aug) {
        for (int k = 0; k < d; ++k) out.q[static_cast<std::size_t>(k)] = dot(p.query_row(k), out.h);
    }

    st.allowed(model, out.allowed);
    auto b2 = p.block(Block::OutputBias);
    out.logits.resize(out.allowed.size());
    for (std::size_t i = 0; i < out.allowed.size(); ++i) {
        Token t = out.allowed[i];
        double z = b2[static_cast<std::size_t>(t)] + dot(p.output_row(t), out.h);
        if (out.think_aug && vocab.is_content(t)) {
            z += (model.think_prior + p.scalar(kScalarCandidateThink)) * ctx.candidate[static_cast<std::size_t>(t)] +
                 p.scalar(kScalarObservedThink) * ctx.observed[static_cast<std::size_t>(t)];
        }
        if (out.think_aug && t == Vocabulary::kThinkClose && ctx.candidate[static_cast<std::size_t>(st.last)]) {
            z += model.close_prior + p.scalar(kScalarCloseAfterCandidate);
        }
        if (out.answer_aug && vocab.is_letter(t)) {
            const auto j = static_cast<std::size_t>(vocab.letter_index(t));
            const Token c = ep.candidates[j];
            z += dot(out.q, p.embedding(c));
            if (out.conclusion == c) z += model.match_prior + p.scalar(kScalarMatch);
            if (ctx.cand_observed[j]) z += p.scalar(kScalarObservedAnswer);
        }
        out.logits[i] = z;
    }

    out.log_probs.resize(out.allowed.size());
    if (out.allowed.size() == 1) {
        out.log_probs[0] = 0.0;
        return;
    }
    double mx = *std::max_element(out.logits.begin(), out.logits.end());
    double s = 0.0;
    for (double z : out.logits) s += std::exp(z - mx);
    double lse = mx + std::log(s);
    for (std::size_t i = 0; i < out.logits.size(); ++i) out.log_probs[i] = out.logits[i] - lse;
}

/// Teacher-forced pass over a response, optionally keeping per-position caches
/// for the backward pass.
class SequencePass {
public:
    SequencePass(const ModelSpec& model, const PolicyParams& raw, const Episode& ep)
        : model_(model), p_(effective_params(model, raw)), ep_(ep), ctx_(model, p_, ep) {}

    std::vector<double> run(std::span<const Token> tokens, bool keep) {
        const int d = model_.dims.embed;
        std::vector<double> gen_sum(static_cast<std::size_t>(d), 0.0);
        PrefixState st;
        std::vector<double> lp;
        lp.reserve(tokens.size());
        steps_.clear();
        tokens_.assign(tokens.begin(), tokens.end());
        StepEval scratch;
        for (Token t : tokens) {
            if (!model_.vocab.contains(t)) throw std::out_of_range("token id out of range");
            if (st.done(model_)) throw std::invalid_argument("tokens continue past the end of the response");
            StepEval& ev = keep ? steps_.emplace_back() : scratch;
            evaluate_step(model_, p_, ep_, ctx_, gen_sum, st, ev);
            int idx = ev.index_of(t);
            if (idx < 0) throw std::invalid_argument("token not permitted by the decoding grammar");
            lp.push_back(ev.log_probs[static_cast<std::size_t>(idx)]);
            axpy(1.0, p_.embedding(t), gen_sum);
            st.push(t, model_.vocab);
        }
        return lp;
    }

    /// grad += sum_i coeff_i * d log pi(token_i) / d theta (raw parameters)
    void backward(std::span<const double> coeff, PolicyParams& out) const {
        PolicyParams grad(p_.dims(), p_.layout().order());
        backward_effective(coeff, grad);
        const PolicyParams aligned = out.layout() == grad.layout() ? std::move(grad) : grad.relayout(out.layout().order());
        for (int b = 0; b < kNumBlocks; ++b) {
            const Block blk = static_cast<Block>(b);
            const double g = model_.gains[static_cast<std::size_t>(b)];
            axpy(g, aligned.block(blk), out.block(blk));
        }
    }

private:
    void backward_effective(std::span<const double> coeff, PolicyParams& grad) const {
        const int d = model_.dims.embed;
        const int hdim = model_.dims.hidden;
        const auto& vocab = model_.vocab;
        const std::size_t n = steps_.size();

        std::vector<double> d_obs(static_cast<std::size_t>(d), 0.0);
        std::vector<std::vector<double>> d_gen(n);
        std::vector<double> dh(static_cast<std::size_t>(hdim));
        std::vector<double> dq(static_cast<std::size_t>(d));
        std::vector<double> da(static_cast<std::size_t>(hdim));
        std::vector<double> dx(static_cast<std::size_t>(3 * d));

        for (std::size_t i = 0; i < n; ++i) {
            const StepEval& ev = steps_[i];
            const double c = coeff[i];
            if (c == 0.0 || ev.allowed.size() == 1) continue;
            const int y = ev.index_of(tokens_[i]);

            std::fill(dh.begin(), dh.end(), 0.0);
            std::fill(dq.begin(), dq.end(), 0.0);
            bool any_q = false;
            for (std::size_t a = 0; a < ev.allowed.size(); ++a) {
                const Token t = ev.allowed[a];
                const double dz = c * ((static_cast<int>(a) == y ? 1.0 : 0.0) - std::exp(ev.log_probs[a]));
                if (dz == 0.0) continue;
                axpy(dz, ev.h, grad.output_row(t));
                grad.block(Block::OutputBias)[static_cast<std::size_t>(t)] += dz;
                axpy(dz, p_.output_row(t), dh);
                if (ev.think_aug && vocab.is_content(t)) {
                    grad.scalar(kScalarCandidateThink) += dz * ctx_.candidate[static_cast<std::size_t>(t)];
                    grad.scalar(kScalarObservedThink) += dz * ctx_.observed[static_cast<std::size_t>(t)];
                }
                if (ev.think_aug && t == Vocabulary::kThinkClose && ctx_.candidate[static_cast<std::size_t>(ev.last)]) {
                    grad.scalar(kScalarCloseAfterCandidate) += dz;
                }
                if (ev.answer_aug && vocab.is_letter(t)) {
                    const auto j = static_cast<std::size_t>(vocab.letter_index(t));
                    const Token cand = ep_.candidates[j];
                    axpy(dz, p_.embedding(cand), dq);
                    axpy(dz, ev.q, grad.embedding(cand));
                    any_q = true;
                    if (ev.conclusion == cand) grad.scalar(kScalarMatch) += dz;
                    if (ctx_.cand_observed[j]) grad.scalar(kScalarObservedAnswer) += dz;
                }
            }
            if (any_q) {
                for (int k = 0; k < d; ++k) {
                    const double g = dq[static_cast<std::size_t>(k)];
                    axpy(g, ev.h, grad.query_row(k));
                    axpy(g, p_.query_row(k), dh);
                }
            }
            for (int j = 0; j < hdim; ++j) {
                const double hj = ev.h[static_cast<std::size_t>(j)];
                da[static_cast<std::size_t>(j)] = dh[static_cast<std::size_t>(j)] * (1.0 - hj * hj);
            }
            std::fill(dx.begin(), dx.end(), 0.0);
            auto db1 = grad.block(Block::HiddenBias);
            for (int j = 0; j < hdim; ++j) {
                const double g = da[static_cast<std::size_t>(j)];
                if (g == 0.0) continue;
                axpy(g, ev.x, grad.hidden_row(j));
                db1[static_cast<std::size_t>(j)] += g;
                axpy(g, p_.hidden_row(j), dx);
            }
            for (int k = 0; k < d; ++k) d_obs[static_cast<std::size_t>(k)] += dx[static_cast<std::size_t>(k)];
            if (ev.gen_count > 0) {
                d_gen[i].assign(dx.begin() + d, dx.begin() + 2 * d);
                for (double& g : d_gen[i]) g /= ev.gen_count;
            }
            axpy(1.0, std::span<const double>(dx).subspan(static_cast<std::size_t>(2 * d)), grad.embedding(ev.last));
        }

        if (!ep_.observation.empty()) {
            const double inv = 1.0 / static_cast<double>(ep_.observation.size());
            for (Token t : ep_.observation) axpy(inv, d_obs, grad.embedding(t));
        }
        // token k feeds the generated-prefix mean at every later position
        std::vector<double> suffix(static_cast<std::size_t>(d), 0.0);
        for (std::size_t k = n; k-- > 0;) {
            if (k + 1 < n && !d_gen[k + 1].empty()) axpy(1.0, d_gen[k + 1], suffix);
            axpy(1.0, suffix, grad.embedding(tokens_[k]));
        }
    }

    const ModelSpec& model_;
    const PolicyParams p_;
    const Episode& ep_;
    EpisodeContext ctx_;
    std::vector<StepEval> steps_;
    std::vector<Token> tokens_;
};

int pick(const StepEval& ev, Rng& rng, double temperature) {
    if (ev.allowed.size() == 1) return 0;
    if (temperature <= 0.0) {
        return static_cast<int>(std::max_element(ev.logits.begin(), ev.logits.end()) - ev.logits.begin());
    }
    double mx = *std::max_element(ev.logits.begin(), ev.logits.end());
    std::vector<double> w(ev.logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = std::exp((ev.logits[i] - mx) / temperature);
        s += w[i];
    }
    double u = uniform01(rng) * s;
    for (std::size_t i = 0; i < w.size(); ++i) {
        u -= w[i];
        if (u < 0.0) return static_cast<int>(i);
    }
    return static_cast<int>(w.size() - 1);
}

void write_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); }
void write_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); }

template <typename T>
T read_pod(std::string_view bytes, std::size_t& pos) {
    if (pos + sizeof(T) > bytes.size()) throw IoError("checkpoint truncated");
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof v);
    pos += sizeof v;
    return v;
}

constexpr std::string_view kMagic = "CARECKPT";
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

// ---------------------------------------------------------------------------

ParamLayout::ParamLayout(Dims dims, BlockOrder order) : dims_(dims), order_(order) {
    if (dims.vocab <= 0 || dims.embed <= 0 || dims.hidden <= 0) throw std::invalid_argument("dims must be positive");
    std::array<bool, kNumBlocks> seen{};
    for (Block b : order) {
        auto i = static_cast<std::size_t>(b);
        if (seen[i]) throw std::invalid_argument("block order repeats a block");
        seen[i] = true;
        sizes_[i] = block_size_of(b, dims);
        offsets_[i] = total_;
        total_ += sizes_[i];
    }
}

PolicyParams::PolicyParams(Dims dims, BlockOrder order) : layout_(dims, order), values_(layout_.total(), 0.0) {}

void PolicyParams::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

bool PolicyParams::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

PolicyParams PolicyParams::relayout(BlockOrder order) const {
    PolicyParams out(dims(), order);
    for (int b = 0; b < kNumBlocks; ++b) {
        auto src = block(static_cast<Block>(b));
        std::copy(src.begin(), src.end(), out.block(static_cast<Block>(b)).begin());
    }
    return out;
}

ModelSpec ModelSpec::from_config(const Config& cfg, const Vocabulary& vocab) {
    ModelSpec m;
    m.vocab = vocab;
    m.dims = Dims{vocab.size(), cfg.embed_dim, cfg.hidden_dim};
    m.match_prior = cfg.match_prior;
    m.think_prior = cfg.think_prior;
    m.close_prior = cfg.close_prior;
    m.constrained = cfg.constrained_decoding;
    m.max_reason_len = cfg.max_reason_len;
    m.max_answer_len = cfg.max_answer_len;
    return m;
}

PolicyParams init_params(std::uint64_t seed, Dims dims, double scale) {
    PolicyParams p(dims);
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(Stream::Init));
    for (double& v : p.flat()) v = (2.0 * uniform01(rng) - 1.0) * scale;
    return p;
}

TokenDistribution forward_logits(const ModelSpec& model, const PolicyParams& raw, const Episode& ep,
                                 std::span<const Token> prefix) {
    const PolicyParams params = effective_params(model, raw);
    const int d = model.dims.embed;
    EpisodeContext ctx(model, params, ep);
    PrefixState st;
    std::vector<double> gen_sum(static_cast<std::size_t>(d), 0.0);
    for (Token t : prefix) {
        if (!model.vocab.contains(t)) throw std::out_of_range("token id out of range");
        axpy(1.0, params.embedding(t), gen_sum);
        st.push(t, model.vocab);
    }
    TokenDistribution out;
    out.logits.assign(static_cast<std::size_t>(model.dims.vocab), kNegInf);
    out.log_probs.assign(static_cast<std::size_t>(model.dims.vocab), kNegInf);
    if (st.done(model)) return out;
    StepEval ev;
    evaluate_step(model, params, ep, ctx, gen_sum, st, ev);
    for (std::size_t i = 0; i < ev.allowed.size(); ++i) {
        out.logits[static_cast<std::size_t>(ev.allowed[i])] = ev.logits[i];
        out.log_probs[static_cast<std::size_t>(ev.allowed[i])] = ev.log_probs[i];
    }
    return out;
}

std::vector<Token> sample_continuation(const ModelSpec& model, const PolicyParams& raw, const Episode& ep,
                                       std::span<const Token> prefix, Rng& rng, double temperature) {
    const PolicyParams params = effective_params(model, raw);
    const int d = model.dims.embed;
    EpisodeContext ctx(model, params, ep);
    PrefixState st;
    std::vector<double> gen_sum(static_cast<std::size_t>(d), 0.0);
    for (Token t : prefix) {
        axpy(1.0, params.embedding(t), gen_sum);
        st.push(t, model.vocab);
    }
    std::vector<Token> out;
    StepEval ev;
    while (!st.done(model)) {
        evaluate_step(model, params, ep, ctx, gen_sum, st, ev);
        if (ev.allowed.empty()) break;
        Token t = ev.allowed[static_cast<std::size_t>(pick(ev, rng, temperature))];
        out.push_back(t);
        axpy(1.0, params.embedding(t), gen_sum);
        st.push(t, model.vocab);
    }
    return out;
}

Trajectory sample_trajectory(const ModelSpec& model, const PolicyParams& raw, const Episode& ep, Rng& rng,
                             double temperature) {
    const PolicyParams params = effective_params(model, raw);
    const int d = model.dims.embed;
    EpisodeContext ctx(model, params, ep);
    PrefixState st;
    std::vector<double> gen_sum(static_cast<std::size_t>(d), 0.0);
    Trajectory traj;
    StepEval ev;
    while (!st.done(model)) {
        evaluate_step(model, params, ep, ctx, gen_sum, st, ev);
        if (ev.allowed.empty()) break;
        auto i = static_cast<std::size_t>(pick(ev, rng, temperature));
        Token t = ev.allowed[i];
        traj.tokens.push_back(t);
        traj.logprobs.push_back(ev.log_probs[i]);
        axpy(1.0, params.embedding(t), gen_sum);
        st.push(t, model.vocab);
    }
    traj.reasoning_len = reasoning_split(traj.tokens);
    traj.parsed = parse_answer(traj.tokens, model.vocab);
    return traj;
}

std::vector<double> logprob_of(const ModelSpec& model, const PolicyParams& params, const Episode& ep,
                               std::span<const Token> tokens) {
    SequencePass pass(model, params, ep);
    return pass.run(tokens, false);
}

double answer_likelihood(const ModelSpec& model, const PolicyParams& params, const Episode& ep,
                         std::span<const Token> prefix, std::span<const Token> answer) {
    if (answer.empty()) throw std::invalid_argument("answer_likelihood needs a non-empty answer");
    std::vector<Token> all(prefix.begin(), prefix.end());
    all.insert(all.end(), answer.begin(), answer.end());
    auto lp = logprob_of(model, params, ep, all);
    double s = 0.0;
    for (std::size_t i = prefix.size(); i < lp.size(); ++i) s += std::exp(lp[i]);
    return s / static_cast<double>(answer.size());
}

double answer_likelihood_streaming(const ModelSpec& model, const PolicyParams& params, const Episode& ep,
                                   std::span<const Token> prefix, std::span<const Token> answer) {
    if (answer.empty()) throw std::invalid_argument("answer_likelihood needs a non-empty answer");
    std::vector<Token> ctx(prefix.begin(), prefix.end());
    double mean = 0.0;
    for (std::size_t i = 0; i < answer.size(); ++i) {
        auto dist = forward_logits(model, params, ep, ctx);
        double p = std::exp(dist.log_probs[static_cast<std::size_t>(answer[i])]);
        mean += (p - mean) / static_cast<double>(i + 1);
        ctx.push_back(answer[i]);
    }
    return mean;
}

std::optional<int> parse_answer(std::span<const Token> tokens, const Vocabulary& vocab) {
    // <think> (non-tag)* </think> <answer> letter </answer>
    const std::size_t n = tokens.size();
    if (n < 5 || tokens[0] != Vocabulary::kThinkOpen) return std::nullopt;
    std::size_t i = 1;
    while (i < n && tokens[i] != Vocabulary::kThinkClose) {
        Token t = tokens[i];
        if (vocab.is_special(t)) return std::nullopt;
        ++i;
    }
    if (i + 4 != n) return std::nullopt;
    if (tokens[i + 1] != Vocabulary::kAnswerOpen || tokens[i + 3] != Vocabulary::kAnswerClose) return std::nullopt;
    int letter = vocab.letter_index(tokens[i + 2]);
    if (letter < 0) return std::nullopt;
    return letter;
}

Token think_conclusion(std::span<const Token> tokens, const Vocabulary& vocab) {
    auto open = std::find(tokens.begin(), tokens.end(), Vocabulary::kThinkOpen);
    if (open == tokens.end()) return -1;
    auto close = std::find(open, tokens.end(), Vocabulary::kThinkClose);
    Token last = -1;
    for (auto it = open + 1; it != close; ++it) {
        if (vocab.is_content(*it)) last = *it;
    }
    return last;
}

// ---------------------------------------------------------------------------

SurrogateResult surrogate_grad(const ModelSpec& model, const PolicyParams& theta, const Episode& ep,
                               std::span<const Trajectory> group, std::span<const double> advantages,
                               double clip_eps, const KLSpec& kl) {
    if (advantages.size() != group.size()) throw std::invalid_argument("advantages and trajectories differ in length");
    if (group.empty()) throw std::invalid_argument("empty group");
    if (kl.mode != KLMode::None && kl.reference == nullptr) throw std::invalid_argument("KL needs a reference model");
    if (!kl.mask.empty() && kl.mask.size() != group.size()) throw std::invalid_argument("KL mask length mismatch");
    if (kl.mode == KLMode::HighAccOnly && kl.mask.empty()) throw std::invalid_argument("high_acc_only needs a mask");

    SurrogateResult res;
    res.gradient = PolicyParams(theta.dims(), theta.layout().order());
    const double inv_g = 1.0 / static_cast<double>(group.size());
    std::size_t kl_tokens = 0;
    std::size_t clipped = 0;
    std::size_t total_tokens = 0;

    for (std::size_t g = 0; g < group.size(); ++g) {
        const Trajectory& tr = group[g];
        if (tr.logprobs.size() != tr.tokens.size()) throw std::invalid_argument("log-prob list length mismatch");
        const std::size_t len = tr.tokens.size();
        if (len == 0) continue;
        const double inv_len = 1.0 / static_cast<double>(len);
        const double adv = advantages[g];

        SequencePass pass(model, theta, ep);
        auto lp = pass.run(tr.tokens, true);
        std::vector<double> coeff(len, 0.0);

        for (std::size_t i = 0; i < len; ++i) {
            const double ratio = std::exp(lp[i] - tr.logprobs[i]);
            const double clipped_ratio = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
            const double unclipped = ratio * adv;
            const double clip_term = clipped_ratio * adv;
            double d_lp = 0.0;
            if (unclipped <= clip_term) {
                res.surrogate += inv_g * inv_len * unclipped;
                d_lp = unclipped;
            } else {
                res.surrogate += inv_g * inv_len * clip_term;
                ++clipped;
            }
            coeff[i] = inv_g * inv_len * d_lp;
        }
        total_tokens += len;

        const bool penalised = kl.mode != KLMode::None && (kl.mask.empty() || kl.mask[g]);
        if (penalised) {
            auto ref = logprob_of(model, *kl.reference, ep, tr.tokens);
            const std::size_t split = std::min(tr.reasoning_len, len);
            for (std::size_t i = 0; i < len; ++i) {
                const double r = std::exp(ref[i] - lp[i]);
                const double k = r - (ref[i] - lp[i]) - 1.0;
                double weight = 0.0;
                if (kl.mode == KLMode::Separate) {
                    const bool reasoning = i < split;
                    const std::size_t part = reasoning ? split : len - split;
                    weight = (reasoning ? kl.beta_reason : kl.beta_answer) * inv_g / static_cast<double>(part);
                } else {
                    weight = kl.beta * inv_g * inv_len;
                }
                res.kl_penalty += weight * k;
                res.kl += k;
                ++kl_tokens;
                // d k / d log pi_theta = 1 - r
                coeff[i] -= weight * (1.0 - r);
            }
        }
        pass.backward(coeff, res.gradient);
    }
    res.kl = kl_tokens ? res.kl / static_cast<double>(kl_tokens) : 0.0;
    res.objective = res.surrogate - res.kl_penalty;
    res.clip_fraction = total_tokens ? static_cast<double>(clipped) / static_cast<double>(total_tokens) : 0.0;
    return res;
}

LikelihoodResult sequence_loglik_grad(const ModelSpec& model, const PolicyParams& theta, const Episode& ep,
                                      std::span<const Token> tokens) {
    LikelihoodResult res;
    res.gradient = PolicyParams(theta.dims(), theta.layout().order());
    SequencePass pass(model, theta, ep);
    auto lp = pass.run(tokens, true);
    for (double v : lp) res.loglik += v;
    std::vector<double> coeff(lp.size(), 1.0);
    pass.backward(coeff, res.gradient);
    return res;
}

void ema_update(PolicyParams& phi, const PolicyParams& theta, double alpha) {
    if (phi.dims() != theta.dims()) throw std::invalid_argument("ema_update shape mismatch");
    const PolicyParams* src = &theta;
    PolicyParams aligned;
    if (phi.layout() != theta.layout()) {
        aligned = theta.relayout(phi.layout().order());
        src = &aligned;
    }
    auto out = phi.flat();
    auto in = src->flat();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * out[i] + (1.0 - alpha) * in[i];
}

// ---------------------------------------------------------------------------

std::string encode_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.theta.dims() != ckpt.dims || ckpt.phi.dims() != ckpt.dims) {
        throw std::invalid_argument("checkpoint parameter shapes disagree with dims");
    }
    std::string out(kMagic);
    write_u32(out, kCheckpointVersion);
    write_u32(out, static_cast<std::uint32_t>(ckpt.dims.vocab));
    write_u32(out, static_cast<std::uint32_t>(ckpt.dims.embed));
    write_u32(out, static_cast<std::uint32_t>(ckpt.dims.hidden));
    write_u32(out, kNumScalars);
    write_u64(out, ckpt.step);
    write_u32(out, static_cast<std::uint32_t>(ckpt.variant));
    const auto theta = ckpt.theta.relayout(kCanonicalOrder);
    const auto phi = ckpt.phi.relayout(kCanonicalOrder);
    write_u64(out, theta.size());
    out.append(reinterpret_cast<const char*>(theta.flat().data()), theta.size() * sizeof(double));
    out.append(reinterpret_cast<const char*>(phi.flat().data()), phi.size() * sizeof(double));
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    if (bytes.substr(0, kMagic.size()) != kMagic) throw IoError("not a checkpoint file");
    std::size_t pos = kMagic.size();
    auto version = read_pod<std::uint32_t>(bytes, pos);
    if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.dims.vocab = static_cast<int>(read_pod<std::uint32_t>(bytes, pos));
    ck.dims.embed = static_cast<int>(read_pod<std::uint32_t>(bytes, pos));
    ck.dims.hidden = static_cast<int>(read_pod<std::uint32_t>(bytes, pos));
    if (read_pod<std::uint32_t>(bytes, pos) != kNumScalars) throw IoError("checkpoint scalar count mismatch");
    ck.step = read_pod<std::uint64_t>(bytes, pos);
    auto variant = read_pod<std::uint32_t>(bytes, pos);
    if (variant >= all_variants().size()) throw IoError("checkpoint variant out of range");
    ck.variant = static_cast<Variant>(variant);
    auto count = read_pod<std::uint64_t>(bytes, pos);
    try {
        ck.theta = PolicyParams(ck.dims);
        ck.phi = PolicyParams(ck.dims);
    } catch (const std::invalid_argument& e) {
        throw IoError(std::string("checkpoint dims invalid: ") + e.what());
    }
    if (count != ck.theta.size()) throw IoError("checkpoint parameter count mismatch");
    if (bytes.size() != pos + 2 * count * sizeof(double)) throw IoError("checkpoint size mismatch");
    std::memcpy(ck.theta.flat().data(), bytes.data() + pos, count * sizeof(double));
    pos += count * sizeof(double);
    std::memcpy(ck.phi.flat().data(), bytes.data() + pos, count * sizeof(double));
    return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    auto bytes = encode_checkpoint(ckpt);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return decode_checkpoint(ss.str());
}

}  // namespace care
