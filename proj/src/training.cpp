#include "blockpipe/training.hpp"

#include "blockpipe/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>

namespace blockpipe {

void Batch::validate() const {
    require(cond.size() == clean.size() && corruption.size() == clean.size(), ErrorKind::InvalidInput,
            "batch: misaligned fields");
    require(schedules.empty() || schedules.size() == clean.size(), ErrorKind::InvalidInput,
            "batch: schedule count does not match the batch");
    for (std::size_t i = 0; i < clean.size(); ++i)
        require(corruption[i].corrupted.size() == clean[i].size(), ErrorKind::InvalidInput,
                "batch: corrupted length differs from the clean sequence");
}

Batch make_batch(const TaskSpec& task, const TokenizerConfig& tok, const BlockLayout& layout, int size, bool forcing,
                 Token mask_token, std::uint64_t seed) {
    require(size >= 1, ErrorKind::InvalidInput, "make_batch: size must be >= 1");
    Batch b;
    for (int i = 0; i < size; ++i) {
        const std::uint64_t s = episode_seed(seed, static_cast<std::uint64_t>(i));
        Episode ep = generate_episode(task, tok, s);
        if (forcing) {
            NoiseSchedule sched = sample_schedule(layout.num_blocks, s ^ 0x5ca1ab1eull);
            BlockLayout rel = layout;
            rel.region_start = 0;
            b.corruption.push_back(forcing_corrupt(ep.truth_tokens, rel, sched, mask_token, s ^ 0xc0ffeeull));
            b.schedules.push_back(std::move(sched));
        } else {
            std::mt19937_64 rng(s ^ 0x9a77aull);
            const double gamma = 1.0 - std::uniform_real_distribution<double>(0.0, 1.0)(rng);
            b.corruption.push_back(corrupt(ep.truth_tokens, gamma, mask_token, s ^ 0xc0ffeeull));
        }
        b.cond.push_back(std::move(ep.cond));
        b.clean.push_back(std::move(ep.truth_tokens));
    }
    return b;
}

LossValue loss_masked_ce(const RealMatrix& logits, const TokenSeq& target, const std::vector<int>& masked_set,
                         Token mask_token) {
    require(logits.rows() == target.size(), ErrorKind::InvalidInput, "masked CE: logits rows != target length");
    LossValue out{0.0, RealMatrix(logits.rows(), logits.cols())};
    if (masked_set.empty()) return out;
    const RealMatrix logp = log_softmax_rows(logits);
    for (int i : masked_set) {
        require(i >= 0 && static_cast<std::size_t>(i) < target.size(), ErrorKind::InvalidInput,
                "masked CE: masked index out of range");
        const Token t = target[static_cast<std::size_t>(i)];
        require(t != mask_token, ErrorKind::InvalidInput, "masked CE: target is the mask token");
        require(t >= 0 && static_cast<std::size_t>(t) < logits.cols(), ErrorKind::InvalidInput,
                "masked CE: target outside the vocabulary");
        const auto r = static_cast<std::size_t>(i);
        out.loss -= logp(r, static_cast<std::size_t>(t));
        for (std::size_t c = 0; c < logits.cols(); ++c) out.dlogits(r, c) = std::exp(logp(r, c));
        out.dlogits(r, static_cast<std::size_t>(t)) -= 1.0;
    }
    return out;
}

LossValue loss_kl(const RealMatrix& student_logits, const RealMatrix& teacher_logits,
                  const std::vector<int>& masked_set) {
    require(student_logits.rows() == teacher_logits.rows() && student_logits.cols() == teacher_logits.cols(),
            ErrorKind::InvalidInput, "KL: student and teacher logits differ in shape");
    LossValue out{0.0, RealMatrix(student_logits.rows(), student_logits.cols())};
    if (masked_set.empty()) return out;
    const RealMatrix ls = log_softmax_rows(student_logits);
    const RealMatrix lt = log_softmax_rows(teacher_logits);
    const std::size_t v = student_logits.cols();
    for (int i : masked_set) {
        require(i >= 0 && static_cast<std::size_t>(i) < student_logits.rows(), ErrorKind::InvalidInput,
                "KL: masked index out of range");
        const auto r = static_cast<std::size_t>(i);
        double kl = 0.0;
        for (std::size_t c = 0; c < v; ++c) kl += std::exp(ls(r, c)) * (ls(r, c) - lt(r, c));
        out.loss += kl;
        // d KL / d z_c = p_c (ln p_c - ln q_c - KL)
        for (std::size_t c = 0; c < v; ++c)
            out.dlogits(r, c) = std::exp(ls(r, c)) * (ls(r, c) - lt(r, c) - kl);
    }
    return out;
}

namespace {

void scale_inplace(RealMatrix& m, double s) {
    for (double& x : m.values()) x *= s;
}

void check_finite(double loss) {
    if (!std::isfinite(loss)) fail(ErrorKind::DivergedTraining, "training: loss is not finite");
}

// blown-up weights show up as non-finite logits before any loss exists
const RealMatrix& finite_logits(const ForwardOutput& out) {
    if (!out.logits.all_finite()) fail(ErrorKind::DivergedTraining, "training: logits are not finite");
    return out.logits;
}

// Shared body of the CE objectives: forward every action position under
// `pattern`, CE on the masked ones.
double ce_objective(const ModelBundle& bundle, const Batch& batch, const AttentionPattern& pattern, Weights* grads) {
    batch.validate();
    const Weights& w = bundle.weights;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const CorruptionResult& c = batch.corruption[i];
        const PositionList queries = action_positions(w.config, static_cast<int>(c.corrupted.size()));
        if (grads == nullptr) {
            if (c.masked_set.empty()) continue;
            const ForwardOutput out = forward(w, nullptr, false, batch.cond[i], c.corrupted, pattern, nullptr, queries);
            total += loss_masked_ce(finite_logits(out), batch.clean[i], c.masked_set, w.config.mask_token).loss;
            continue;
        }
        if (c.masked_set.empty()) continue;
        ForwardTape tape;
        const ForwardOutput out = forward_recorded(w, nullptr, false, batch.cond[i], c.corrupted, pattern, queries, tape);
        LossValue lv = loss_masked_ce(finite_logits(out), batch.clean[i], c.masked_set, w.config.mask_token);
        total += lv.loss;
        scale_inplace(lv.dlogits, inv_b);
        backward(w, nullptr, tape, lv.dlogits, grads, nullptr);
    }
    return total * inv_b;
}

std::vector<RealMatrix*> param_list(Weights& w) {
    std::vector<RealMatrix*> out;
    w.for_each([&](const std::string&, RealMatrix& m) { out.push_back(&m); });
    return out;
}

std::vector<RealMatrix*> param_list(AdapterWeights& a) {
    std::vector<RealMatrix*> out;
    a.for_each([&](const std::string&, RealMatrix& m) { out.push_back(&m); });
    return out;
}

template <class T> std::vector<const RealMatrix*> grad_list(const T& g) {
    std::vector<const RealMatrix*> out;
    g.for_each([&](const std::string&, const RealMatrix& m) { out.push_back(&m); });
    return out;
}

} // namespace

double loss_act(const ModelBundle& bundle, const Batch& batch, Weights* grads) {
    return ce_objective(bundle, batch, AttentionPattern::bidirectional(), grads);
}

double loss_bd(const ModelBundle& bundle, const Batch& batch, const AttentionPattern& pattern, Weights* grads) {
    require(pattern.is_block_causal(), ErrorKind::InvalidInput, "loss_bd: the block-diffusion loss needs BlockCausal");
    return ce_objective(bundle, batch, pattern, grads);
}

double loss_ad(const ModelBundle& student, bool student_active, const ModelBundle& teacher, bool teacher_active,
               const Batch& batch, const BlockLayout& layout, AdapterWeights* adapter_grads) {
    require(!teacher_active, ErrorKind::ProtocolViolation,
            "loss_ad: teacher logits must be computed with adapters disabled");
    require(!student_active || student.adapters.has_value(), ErrorKind::InvalidInput,
            "loss_ad: student adapters requested but the bundle has none");
    batch.validate();
    const AdapterWeights* sa = student.adapters ? &*student.adapters : nullptr;
    const auto student_pattern = AttentionPattern::block_causal(layout);
    const auto teacher_pattern = AttentionPattern::bidirectional();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const CorruptionResult& c = batch.corruption[i];
        if (c.masked_set.empty()) continue;
        const PositionList queries = action_positions(student.weights.config, static_cast<int>(c.corrupted.size()));
        const ForwardOutput t_out =
            forward(teacher.weights, nullptr, false, batch.cond[i], c.corrupted, teacher_pattern, nullptr, queries);
        if (adapter_grads == nullptr) {
            const ForwardOutput s_out =
                forward(student.weights, sa, student_active, batch.cond[i], c.corrupted, student_pattern, nullptr, queries);
            total += loss_kl(finite_logits(s_out), finite_logits(t_out), c.masked_set).loss;
            continue;
        }
        require(student_active, ErrorKind::InvalidInput, "loss_ad: adapter gradients need active adapters");
        ForwardTape tape;
        const ForwardOutput s_out = forward_recorded(student.weights, sa, true, batch.cond[i], c.corrupted,
                                                     student_pattern, queries, tape);
        LossValue lv = loss_kl(finite_logits(s_out), finite_logits(t_out), c.masked_set);
        total += lv.loss;
        scale_inplace(lv.dlogits, inv_b);
        backward(student.weights, sa, tape, lv.dlogits, nullptr, adapter_grads);
    }
    return total * inv_b;
}

void adam_step(OptimState& st, const std::vector<RealMatrix*>& params, const std::vector<const RealMatrix*>& grads) {
    require(params.size() == grads.size(), ErrorKind::InvalidInput, "adam: parameter/gradient count mismatch");
    if (st.m.empty()) {
        for (const RealMatrix* p : params) {
            st.m.emplace_back(p->rows(), p->cols());
            st.v.emplace_back(p->rows(), p->cols());
        }
    }
    require(st.m.size() == params.size(), ErrorKind::InvalidInput, "adam: moment count does not match parameters");
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->values();
        auto g = grads[i]->values();
        auto m = st.m[i].values();
        auto v = st.v[i].values();
        require(p.size() == g.size() && p.size() == m.size(), ErrorKind::InvalidInput, "adam: shape mismatch");
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
            const double mh = m[j] / c1;
            const double vh = v[j] / c2;
            p[j] -= st.lr * mh / (std::sqrt(vh) + st.eps);
        }
    }
}

std::string to_string(Regime r) {
    switch (r) {
    case Regime::ACT_finetune: return "act_finetune";
    case Regime::BD_from_scratch: return "bd_from_scratch";
    case Regime::BD_from_finetuned: return "bd_from_finetuned";
    case Regime::AD_from_finetuned: return "ad_from_finetuned";
    }
    return "unknown";
}

Regime regime_from_string(const std::string& s) {
    if (s == "act_finetune") return Regime::ACT_finetune;
    if (s == "bd_from_scratch") return Regime::BD_from_scratch;
    if (s == "bd_from_finetuned") return Regime::BD_from_finetuned;
    if (s == "ad_from_finetuned") return Regime::AD_from_finetuned;
    fail(ErrorKind::Config, "unknown regime '" + s + "'");
}

bool regime_uses_forcing(Regime r) { return r != Regime::ACT_finetune; }

double default_learning_rate(Regime r) { return r == Regime::AD_from_finetuned ? 1e-3 : 3e-4; }

double lr_factor(int step, int total, int warmup, bool cosine) {
    if (!cosine) return 1.0;
    if (warmup > 0 && step <= warmup) return static_cast<double>(step) / warmup;
    if (total <= warmup) return 1.0;
    const double frac = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return 0.5 * (1.0 + std::cos(std::acos(-1.0) * frac));
}

double train_step(ModelBundle& bundle, const Batch& batch, Regime regime, OptimState& optim, const BlockLayout& layout,
                  const ModelBundle* teacher) {
    double loss = 0.0;
    if (regime == Regime::AD_from_finetuned) {
        require(teacher != nullptr, ErrorKind::Config, "train_step: distillation needs a frozen teacher");
        require(bundle.adapters.has_value(), ErrorKind::Config, "train_step: distillation needs student adapters");
        AdapterWeights g = bundle.adapters->zeros_like();
        loss = loss_ad(bundle, true, *teacher, false, batch, layout, &g);
        check_finite(loss);
        adam_step(optim, param_list(*bundle.adapters), grad_list(g));
    } else {
        Weights g = bundle.weights.zeros_like();
        loss = regime == Regime::ACT_finetune
                   ? loss_act(bundle, batch, &g)
                   : loss_bd(bundle, batch, AttentionPattern::block_causal(layout), &g);
        check_finite(loss);
        adam_step(optim, param_list(bundle.weights), grad_list(g));
    }
    ++bundle.training_step;
    return loss;
}

double grad_check(const LossFn& f, const ModelBundle& bundle, GradTarget target, int probes, std::uint64_t seed) {
    require(probes >= 1, ErrorKind::InvalidInput, "grad_check: probes must be >= 1");
    require(target == GradTarget::Weights || bundle.adapters.has_value(), ErrorKind::InvalidInput,
            "grad_check: adapter target without adapters");
    Weights wg = bundle.weights.zeros_like();
    std::optional<AdapterWeights> ag;
    if (target == GradTarget::Adapters) ag = bundle.adapters->zeros_like();
    f(bundle, target == GradTarget::Weights ? &wg : nullptr, ag ? &*ag : nullptr);

    ModelBundle probe = bundle;
    std::vector<RealMatrix*> params = target == GradTarget::Weights ? param_list(probe.weights)
                                                                    : param_list(*probe.adapters);
    std::vector<const RealMatrix*> grads = target == GradTarget::Weights ? grad_list(wg) : grad_list(*ag);
    std::vector<std::size_t> offsets{0};
    for (const RealMatrix* p : params) offsets.push_back(offsets.back() + p->size());

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, offsets.back() - 1);
    constexpr double h = 1e-5;
    double worst = 0.0;
    for (int k = 0; k < probes; ++k) {
        const std::size_t flat = pick(rng);
        const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat);
        const std::size_t t = static_cast<std::size_t>(it - offsets.begin()) - 1;
        const std::size_t j = flat - offsets[t];
        double& x = params[t]->values()[j];
        const double x0 = x;
        x = x0 + h;
        const double up = f(probe, nullptr, nullptr);
        x = x0 - h;
        const double down = f(probe, nullptr, nullptr);
        x = x0;
        const double numeric = (up - down) / (2.0 * h);
        const double analytic = grads[t]->values()[j];
        // below 1e-5 the comparison is absolute: central differences carry ~1e-10 of
        // rounding noise, and some gradients (key biases) are exactly zero
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
        worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
    return worst;
}

namespace {

std::size_t argmax_row(const RealMatrix& m, std::size_t r) {
    const auto row = m.row(r);
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

} // namespace

AccuracyReport masked_accuracy(const ModelBundle& bundle, bool active, const AttentionPattern& pattern,
                               const Batch& batch, const ModelBundle* teacher) {
    batch.validate();
    const AdapterWeights* ad = bundle.adapters ? &*bundle.adapters : nullptr;
    std::size_t hits = 0, agree = 0, total = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const CorruptionResult& c = batch.corruption[i];
        if (c.masked_set.empty()) continue;
        const PositionList queries = action_positions(bundle.weights.config, static_cast<int>(c.corrupted.size()));
        const ForwardOutput out = forward(bundle.weights, ad, active, batch.cond[i], c.corrupted, pattern, nullptr, queries);
        std::optional<ForwardOutput> t_out;
        if (teacher)
            t_out = forward(teacher->weights, nullptr, false, batch.cond[i], c.corrupted,
                            AttentionPattern::bidirectional(), nullptr, queries);
        for (int m : c.masked_set) {
            const auto r = static_cast<std::size_t>(m);
            const std::size_t a = argmax_row(out.logits, r);
            if (a == static_cast<std::size_t>(batch.clean[i][r])) ++hits;
            if (t_out && a == argmax_row(t_out->logits, r)) ++agree;
            ++total;
        }
    }
    AccuracyReport rep;
    rep.masked = total;
    if (total > 0) {
        rep.accuracy = static_cast<double>(hits) / static_cast<double>(total);
        rep.agreement = static_cast<double>(agree) / static_cast<double>(total);
    }
    return rep;
}

TrainOutcome train(ModelBundle& bundle, const TrainConfig& cfg, const ModelBundle* teacher,
                   const std::function<void(const TrainLogRow&)>& on_row) {
    require(cfg.steps >= 0 && cfg.batch_size >= 1 && cfg.eval_every >= 1, ErrorKind::Config,
            "train: steps, batch_size and eval_every must be non-negative/positive");
    const bool forcing = regime_uses_forcing(cfg.regime);
    const bool distill = cfg.regime == Regime::AD_from_finetuned;
    require(!distill || teacher != nullptr, ErrorKind::Config, "train: distillation needs a teacher checkpoint");
    BlockLayout layout = cfg.layout;
    layout.region_start = bundle.weights.config.cond_len;
    layout.validate();
    const AttentionPattern eval_pattern =
        forcing ? AttentionPattern::block_causal(layout) : AttentionPattern::bidirectional();
    const Token mask = bundle.weights.config.mask_token;

    OptimState optim;
    const double base_lr = cfg.learning_rate.value_or(default_learning_rate(cfg.regime));
    const Batch held_out = make_batch(cfg.task, cfg.tokenizer, layout, cfg.eval_examples, forcing, mask,
                                      episode_seed(cfg.seed, 0xe7a1ull));

    TrainOutcome result;
    const auto t0 = std::chrono::steady_clock::now();
    auto evaluate = [&](std::int64_t step, double loss) {
        const AccuracyReport acc = masked_accuracy(bundle, distill, eval_pattern, held_out, distill ? teacher : nullptr);
        TrainLogRow row{step, loss, acc.accuracy, acc.agreement,
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
        result.log.push_back(row);
        result.final_accuracy = acc.accuracy;
        if (on_row) on_row(row);
        if (cfg.stop_at_accuracy && !result.reached_at && acc.accuracy >= *cfg.stop_at_accuracy)
            result.reached_at = step;
    };

    double recent = 0.0;
    int recent_n = 0;
    evaluate(0, 0.0);
    for (int s = 1; s <= cfg.steps && !result.reached_at; ++s) {
        const Batch batch = make_batch(cfg.task, cfg.tokenizer, layout, cfg.batch_size, forcing, mask,
                                       episode_seed(cfg.seed, 0x10000ull + static_cast<std::uint64_t>(s)));
        optim.lr = base_lr * lr_factor(s, cfg.steps, cfg.warmup_steps, cfg.cosine_decay);
        recent += train_step(bundle, batch, cfg.regime, optim, layout, teacher);
        ++recent_n;
        if (s % cfg.eval_every == 0 || s == cfg.steps) {
            evaluate(s, recent / recent_n);
            recent = 0.0;
            recent_n = 0;
        }
    }
    return result;
}

void write_train_log_header(std::ostream& os) { os << "step,loss,masked_accuracy,agreement,wall_seconds\n"; }

void write_train_log_row(std::ostream& os, const TrainLogRow& row) {
    os << row.step << ',' << std::setprecision(17) << row.loss << ',' << row.accuracy << ',' << row.agreement << ','
       << std::setprecision(6) << row.wall_seconds << '\n';
}

} // namespace blockpipe
