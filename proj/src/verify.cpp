#include "prefdyn/verify.hpp"

#include "prefdyn/data.hpp"
#include "prefdyn/dynamics.hpp"
#include "prefdyn/errors.hpp"
#include "prefdyn/objectives.hpp"
#include "prefdyn/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace prefdyn {

namespace {

using nlohmann::json;

enum PropertyId {
  kGradDpo = 1,
  kGradSft,
  kGradReg,
  kGradObjective,
  kRichardson,
  kAudit,
  kTabular,
  kDisplacement,
};

constexpr double kAuditTolerance = 1e-12;

class Tracker {
 public:
  Tracker(std::string name, std::string description, double tolerance, int max_dumped)
      : max_dumped_(max_dumped) {
    result_.name = std::move(name);
    result_.description = std::move(description);
    result_.tolerance = tolerance;
    result_.worst_slack = std::numeric_limits<double>::infinity();
  }

  // Records one instance. `detail` is only evaluated on failure.
  template <typename DetailFn>
  void record(double slack, bool ok, DetailFn detail) {
    ++result_.instances;
    result_.worst_slack = std::min(result_.worst_slack, slack);
    if (ok) return;
    ++result_.failures;
    if (static_cast<int>(result_.failing_instances.size()) < max_dumped_) {
      result_.failing_instances.push_back(detail());
    }
  }
  void record(double slack, bool ok) {
    record(slack, ok, [] { return json::object(); });
  }

  PropertyResult& result() { return result_; }
  PropertyResult take() { return std::move(result_); }

 private:
  PropertyResult result_;
  int max_dumped_;
};

PolicyKind alternate(int i) { return i % 2 == 0 ? PolicyKind::tabular : PolicyKind::log_linear; }

SplitPolicy with_values(const SplitPolicy& policy, const Eigen::VectorXd& values) {
  SplitPolicy out = policy;
  out.params().values() = values;
  return out;
}

json dump_instance(const RandomInstance& inst, int property, int index, std::uint64_t seed) {
  json triples = json::array();
  for (const auto& t : inst.triples) triples.push_back({{"x", t.x}, {"y_w", t.y_w}, {"y_l", t.y_l}});
  json pairs = json::array();
  for (const auto& p : inst.pairs) pairs.push_back({{"x", p.x}, {"y_w", p.y_w}});
  return {{"seed", seed},       {"property_id", property}, {"index", index},
          {"policy", to_json(inst.policy)}, {"ref", to_json(inst.ref)},
          {"triples", std::move(triples)},  {"sft_pairs", std::move(pairs)}};
}

bool near_hinge_kink(const SplitPolicy& policy, const std::vector<PreferenceTriple>& triples) {
  for (const auto& t : triples) {
    const double nw = policy.grad_log_prob(t.x, t.y_w, Block::theta).norm();
    const double nl = policy.grad_log_prob(t.x, t.y_l, Block::theta).norm();
    if (std::abs(nl - nw) < 1e-4) return true;
  }
  return false;
}

DeltaPrediction mutated(DeltaPrediction p, Mutation m) {
  if (m == Mutation::flip_delta_l_sign) p.delta_l = -p.delta_l;
  return p;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

struct FdCase {
  Eigen::VectorXd analytic;
  Eigen::VectorXd numeric;
};

template <typename MakeCase>
PropertyResult fd_property(const VerifyOptions& opt, int id, std::string name,
                           std::string description, bool avoid_kink, MakeCase make_case) {
  Tracker tr(std::move(name), std::move(description), opt.fd_rtol, opt.max_dumped_failures);
  for (int i = 0; i < opt.gradient_instances; ++i) {
    auto rng = instance_rng(opt.seed, id, i);
    RandomInstance inst = random_instance(alternate(i), rng);
    // The hinge is not differentiable at its kink; finite differences
    // straddling it measure nothing useful.
    while (avoid_kink && near_hinge_kink(inst.policy, inst.triples)) {
      inst = random_instance(alternate(i), rng);
    }
    const FdCase c = make_case(inst, rng);
    const double err = relative_error(c.analytic, c.numeric);
    tr.record(opt.fd_rtol - err, err <= opt.fd_rtol, [&] {
      json d = dump_instance(inst, id, i, opt.seed);
      d["relative_error"] = err;
      return d;
    });
  }
  return tr.take();
}

}  // namespace

Eigen::VectorXd central_difference(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h) {
  Eigen::VectorXd grad(x.size());
  Eigen::VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe(i) = x(i) + h;
    const double up = f(probe);
    probe(i) = x(i) - h;
    const double down = f(probe);
    probe(i) = x(i);
    grad(i) = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  if (analytic.size() != numeric.size()) return std::numeric_limits<double>::infinity();
  const double scale = std::max(analytic.lpNorm<Eigen::Infinity>(), numeric.lpNorm<Eigen::Infinity>());
  const double diff = (analytic - numeric).lpNorm<Eigen::Infinity>();
  if (scale == 0.0) return 0.0;
  return diff / scale;
}

RandomInstance random_instance(PolicyKind kind, std::mt19937_64& rng, int max_batch) {
  std::uniform_int_distribution<int> prompts_d(1, 3);
  std::uniform_int_distribution<int> outputs_d(3, 7);
  std::uniform_int_distribution<int> dim_d(2, 5);
  std::uniform_int_distribution<int> batch_d(1, std::max(1, max_batch));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto normals = [&](Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal(rng);
    return v;
  };

  const int prompts = prompts_d(rng);
  const int outputs = outputs_d(rng);
  RandomInstance inst;
  if (kind == PolicyKind::tabular) {
    const Eigen::Index n = static_cast<Eigen::Index>(prompts) * outputs;
    inst.policy = SplitPolicy::tabular(prompts, outputs, normals(n), normals(n));
    inst.ref = SplitPolicy::tabular(prompts, outputs, normals(n), normals(n));
  } else {
    const int d = dim_d(rng);
    Eigen::MatrixXd f(static_cast<Eigen::Index>(prompts) * outputs, d);
    for (Eigen::Index r = 0; r < f.rows(); ++r) {
      for (Eigen::Index c = 0; c < d; ++c) f(r, c) = normal(rng);
    }
    inst.policy = SplitPolicy::log_linear(prompts, outputs, f, normals(d), normals(d));
    inst.ref = SplitPolicy::log_linear(prompts, outputs, f, normals(d), normals(d));
  }
  std::uniform_int_distribution<int> x_d(0, prompts - 1);
  std::uniform_int_distribution<int> y_d(0, outputs - 1);
  const int n_triples = batch_d(rng);
  for (int i = 0; i < n_triples; ++i) {
    const int x = x_d(rng);
    const int w = y_d(rng);
    int l = y_d(rng);
    while (l == w) l = y_d(rng);
    inst.triples.push_back({x, w, l});
  }
  const int n_pairs = batch_d(rng);
  for (int i = 0; i < n_pairs; ++i) inst.pairs.push_back({x_d(rng), y_d(rng)});
  return inst;
}

std::mt19937_64 instance_rng(std::uint64_t seed, int property, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(property), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

bool VerifyReport::passed() const {
  return !properties.empty() &&
         std::all_of(properties.begin(), properties.end(),
                     [](const PropertyResult& p) { return !p.gating || p.passed(); });
}

const PropertyResult* VerifyReport::find(const std::string& name) const {
  for (const auto& p : properties) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

VerifyReport run_verify(const VerifyOptions& opt) {
  VerifyReport report;
  report.seed = opt.seed;

  report.properties.push_back(fd_property(
      opt, kGradDpo, "grad_dpo_fd", "analytic DPO gradient vs central differences", false,
      [&](const RandomInstance& inst, std::mt19937_64& rng) {
        const double beta = uniform(rng, 0.1, 1.0);
        auto f = [&](const Eigen::VectorXd& v) {
          return dpo_loss(with_values(inst.policy, v), inst.ref, inst.triples, beta);
        };
        return FdCase{dpo_gradient(inst.policy, inst.ref, inst.triples, beta, Block::all),
                      central_difference(f, inst.policy.params().values(), opt.fd_step)};
      }));

  report.properties.push_back(fd_property(
      opt, kGradSft, "grad_sft_fd", "analytic SFT gradient vs central differences", false,
      [&](const RandomInstance& inst, std::mt19937_64&) {
        auto f = [&](const Eigen::VectorXd& v) {
          return sft_loss(with_values(inst.policy, v), inst.pairs);
        };
        return FdCase{sft_gradient(inst.policy, inst.pairs, Block::all),
                      central_difference(f, inst.policy.params().values(), opt.fd_step)};
      }));

  report.properties.push_back(fd_property(
      opt, kGradReg, "grad_reg_fd",
      "hinge regularizer (sub)gradient via Hessian-vector products vs central differences", true,
      [&](const RandomInstance& inst, std::mt19937_64&) {
        auto f = [&](const Eigen::VectorXd& v) {
          return reg_term(with_values(inst.policy, v), inst.triples);
        };
        return FdCase{reg_gradient(inst.policy, inst.triples, Block::all),
                      central_difference(f, inst.policy.params().values(), opt.fd_step)};
      }));

  report.properties.push_back(fd_property(
      opt, kGradObjective, "grad_objective_fd",
      "penalized objective gradient, both blocks, inner solution held fixed", true,
      [&](const RandomInstance& inst, std::mt19937_64& rng) {
        const ObjectiveWeights w{uniform(rng, 0.1, 1.0), uniform(rng, 0.0, 2.0),
                                 uniform(rng, 0.0, 1.0)};
        const Eigen::VectorXd inner =
            inner_sft_descent(inst.policy, inst.pairs, uniform(rng, 0.05, 0.5), 1).phi_prime;
        auto f = [&](const Eigen::VectorXd& v) {
          return evaluate_objective(with_values(inst.policy, v), inst.ref, inner, inst.triples,
                                    inst.pairs, w)
              .total;
        };
        Eigen::VectorXd analytic(inst.policy.params().size());
        analytic << grad_theta_total(inst.policy, inst.ref, inner, inst.triples, inst.pairs, w),
            grad_phi_total(inst.policy, inst.ref, inst.triples, inst.pairs, w);
        return FdCase{analytic, central_difference(f, inst.policy.params().values(), opt.fd_step)};
      }));

  // First-order accuracy: the prediction error should shrink ~4x when eta halves.
  {
    Tracker tr("richardson_first_order",
               "median of err(eta)/err(eta/2) for the predicted probability change", 0.0,
               opt.max_dumped_failures);
    std::vector<double> ratios;
    const double beta = 0.5;
    for (int i = 0; i < opt.richardson_instances; ++i) {
      auto rng = instance_rng(opt.seed, kRichardson, i);
      const RandomInstance inst = random_instance(alternate(i), rng, 1);
      const PreferenceTriple& t = inst.triples.front();
      auto err = [&](double eta) {
        const DeltaPrediction p = mutated(predict_deltas(inst.policy, inst.ref, t, eta, beta), opt.mutation);
        const Eigen::VectorXd m = measure_deltas(inst.policy, inst.ref, t, eta, beta);
        return std::abs(m(t.y_w) - p.delta_w) + std::abs(m(t.y_l) - p.delta_l);
      };
      const double coarse = err(opt.richardson_eta);
      const double fine = err(opt.richardson_eta / 2.0);
      if (fine > 0.0) ratios.push_back(coarse / fine);
    }
    PropertyResult& r = tr.result();
    r.instances = static_cast<int>(ratios.size());
    if (!ratios.empty()) {
      std::sort(ratios.begin(), ratios.end());
      const std::size_t n = ratios.size();
      const double median =
          n % 2 == 1 ? ratios[n / 2] : 0.5 * (ratios[n / 2 - 1] + ratios[n / 2]);
      r.statistic = median;
      r.worst_slack = std::min(median - 3.0, 5.0 - median);
      if (r.worst_slack < 0.0) {
        r.failures = 1;
        r.failing_instances.push_back({{"median_ratio", median}, {"accepted", {3.0, 5.0}}});
      }
    } else {
      r.worst_slack = -1.0;
    }
    report.properties.push_back(tr.take());
  }

  // Exact single-step audits on shared random instances.
  {
    Tracker conservation("conservation", "sum over outputs of the measured probability change",
                         kAuditTolerance, opt.max_dumped_failures);
    Tracker c1("corollary1", "c1_lower_w <= delta_w_pred and delta_l_pred <= c1_upper_l",
               kAuditTolerance, opt.max_dumped_failures);
    const std::string c2_text =
        "delta_w_pred - delta_l_pred >= eta beta (1 - sigma) |sqrt(pi_w) g_w - sqrt(pi_l) g_l|^2";
    Tracker c2("corollary2", c2_text, kAuditTolerance, opt.max_dumped_failures);
    Tracker c2_valid("corollary2_nonpositive_dot", c2_text + ", on instances with g_w.g_l <= 0",
                     kAuditTolerance, opt.max_dumped_failures);
    for (int i = 0; i < opt.audit_instances; ++i) {
      auto rng = instance_rng(opt.seed, kAudit, i);
      const RandomInstance inst = random_instance(alternate(i), rng, 1);
      const PreferenceTriple& t = inst.triples.front();
      const double eta = uniform(rng, 0.01, 1.0);
      const double beta = uniform(rng, 0.1, 2.0);
      const GradientGeometry g = gradient_geometry(inst.policy, inst.ref, t, beta);
      const DeltaPrediction p = mutated(predict_deltas(g, eta, beta), opt.mutation);
      const Corollary1Bounds b = corollary1_bounds(g, eta, beta);
      const double c2_bound = corollary2_lower_bound(g, eta, beta);
      auto detail = [&](json observed) {
        json d = dump_instance(inst, kAudit, i, opt.seed);
        d["eta"] = eta;
        d["beta"] = beta;
        d["observed"] = std::move(observed);
        return d;
      };

      const double sum = measure_deltas(inst.policy, inst.ref, t, eta, beta).sum();
      const double cons_slack = kAuditTolerance - std::abs(sum);
      conservation.record(cons_slack, cons_slack >= 0.0, [&] { return detail({{"sum", sum}}); });

      const double c1_slack = kAuditTolerance + std::min(p.delta_w - b.lower_w, b.upper_l - p.delta_l);
      c1.record(c1_slack, c1_slack >= 0.0, [&] {
        return detail({{"delta_w_pred", p.delta_w}, {"delta_l_pred", p.delta_l},
                       {"c1_lower_w", b.lower_w}, {"c1_upper_l", b.upper_l}});
      });

      const double c2_slack = kAuditTolerance + (p.delta_w - p.delta_l - c2_bound);
      auto c2_detail = [&] {
        return detail({{"delta_w_pred", p.delta_w}, {"delta_l_pred", p.delta_l},
                       {"c2_lower", c2_bound}, {"dot_wl", g.dot_wl}});
      };
      c2.record(c2_slack, c2_slack >= 0.0, c2_detail);
      if (g.dot_wl <= 0.0) c2_valid.record(c2_slack, c2_slack >= 0.0, c2_detail);
    }
    report.properties.push_back(conservation.take());
    report.properties.push_back(c1.take());
    // delta_w - delta_l minus the bound equals -(sqrt(pi_w) - sqrt(pi_l))^2 g_w.g_l
    // (times eta beta (1 - sigma)), so the bound fails whenever the two
    // gradients are positively aligned and pi_w != pi_l.
    PropertyResult literal = c2.take();
    literal.gating = false;
    literal.note = "does not hold when g_w.g_l > 0; see corollary2_nonpositive_dot";
    report.properties.push_back(std::move(literal));
    report.properties.push_back(c2_valid.take());
  }

  {
    Tracker tr("tabular_no_case1", "tabular instances never classify as case1 (slack = term_w)",
               0.0, opt.max_dumped_failures);
    for (int i = 0; i < opt.tabular_instances; ++i) {
      auto rng = instance_rng(opt.seed, kTabular, i);
      const RandomInstance inst = random_instance(PolicyKind::tabular, rng, 1);
      const GradientGeometry g = gradient_geometry(inst.policy, inst.ref, inst.triples.front(), 0.5);
      tr.record(g.term_w(), classify(g) != CaseLabel::case1, [&] {
        json d = dump_instance(inst, kTabular, i, opt.seed);
        d["term_w"] = g.term_w();
        return d;
      });
    }
    report.properties.push_back(tr.take());
  }

  {
    Tracker tr("displacement_case1",
               "generated displacement-prone tasks: certificate re-verifies and one DPO step gives "
               "dpi_w < 0, dpi_l <= 0, dpi_ystar > 0 (slack = min(-dpi_w, -dpi_l, dpi_ystar))",
               0.0, opt.max_dumped_failures);
    const double eta = 0.1;
    const double beta = 0.5;
    for (int i = 0; i < opt.displacement_instances; ++i) {
      auto rng = instance_rng(opt.seed, kDisplacement, i);
      const DisplacementTask task = generate_displacement_prone(DisplacementParams{}, rng);
      const GradientGeometry g = gradient_geometry(task.policy, task.policy, task.triple, beta);
      const Eigen::VectorXd d = measure_deltas(task.policy, task.policy, task.triple, eta, beta);
      const double dw = d(task.triple.y_w);
      const double dl = d(task.triple.y_l);
      const double ds = d(task.ystar);
      const bool ok = classify(g) == CaseLabel::case1 && dw < 0.0 && dl <= 0.0 && ds > 0.0;
      tr.record(std::min({-dw, -dl, ds}), ok, [&] {
        return json{{"index", i},
                    {"policy", to_json(task.policy)},
                    {"ystar", task.ystar},
                    {"delta_w", dw},
                    {"delta_l", dl},
                    {"delta_ystar", ds},
                    {"term_w", g.term_w()}};
      });
    }
    report.properties.push_back(tr.take());
  }
  return report;
}

json to_json(const VerifyReport& report) {
  json props = json::array();
  for (const auto& p : report.properties) {
    json entry{{"name", p.name},
               {"description", p.description},
               {"passed", p.passed()},
               {"gating", p.gating},
               {"instances", p.instances},
               {"failures", p.failures},
               {"tolerance", p.tolerance},
               {"worst_slack", p.worst_slack}};
    if (p.statistic) entry["statistic"] = *p.statistic;
    if (!p.note.empty()) entry["note"] = p.note;
    entry["failing_instances"] = p.failing_instances;
    props.push_back(std::move(entry));
  }
  return {{"seed", report.seed}, {"passed", report.passed()}, {"properties", std::move(props)}};
}

}  // namespace prefdyn
