// Copyright 2026 The kmsd Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <chrono>
#include <future>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "kmsd/io.hpp"

namespace kmsd::cli {

inline constexpr const char* kSchemaVersion = "kmsd-report/1";

enum ExitCode : int { kPass = 0, kCertificationFailure = 1, kInputError = 2, kInfeasible = 3 };

struct Options {
  std::string command;
  std::string rho, psi, gen, gen2, family, report, out, config;
  std::optional<std::uint64_t> seed;
  std::optional<int> n;
  int kraus_rank = 2;
  std::optional<double> tol;
  std::string method = "both";
  std::string recovery = "schur";
  double t = 1.0;
  int steps = 8;
  int trials = 50;
  std::string seeds;
  bool no_cond_bound = false;
  bool quadrature = false;
};

inline json options_to_json(const Options& o) {
  json j = {{"kraus_rank", o.kraus_rank}, {"method", o.method}, {"recovery", o.recovery}, {"t", o.t},
            {"steps", o.steps},           {"trials", o.trials}, {"no_cond_bound", o.no_cond_bound},
            {"quadrature", o.quadrature}};
  if (o.seed) j["seed"] = *o.seed;
  if (o.n) j["n"] = *o.n;
  if (o.tol) j["tol"] = *o.tol;
  return j;
}

inline Options options_from_json(const std::string& command, const json& j) {
  Options o;
  o.command = command;
  o.kraus_rank = j.value("kraus_rank", 2);
  o.method = j.value("method", std::string("both"));
  o.recovery = j.value("recovery", std::string("schur"));
  o.t = j.value("t", 1.0);
  o.steps = j.value("steps", 8);
  o.trials = j.value("trials", 50);
  o.no_cond_bound = j.value("no_cond_bound", false);
  o.quadrature = j.value("quadrature", false);
  if (j.contains("seed")) o.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("n")) o.n = j["n"].get<int>();
  if (j.contains("tol")) o.tol = j["tol"].get<double>();
  return o;
}

/** Loaded input documents, keyed by role (rho, psi, gen, gen2, family). */
using Inputs = std::map<std::string, JsonDocument>;

/** Accepts the bare object or a bundle carrying it under `key` (e.g. a `random --out` file). */
inline const json& unwrap(const json& j, const std::string& key) {
  if (j.is_object() && j.contains(key) && j[key].is_object()) return j[key];
  return j;
}

struct Outcome {
  json doc = json::object();
  int exit = kPass;
};

inline void add_report(Outcome& o, const Report& r) {
  o.doc["reports"][r.name] = report_to_json(r);
  if (!r.pass && o.exit == kPass) o.exit = kCertificationFailure;
}

inline double tol_or(const Options& o, double fallback) { return o.tol.value_or(fallback); }

/** Runs f and records its wall time under timings/<stage>. */
template <typename F>
inline auto timed(Outcome& out, const std::string& stage, F&& f) -> decltype(f()) {
  const auto start = std::chrono::steady_clock::now();
  struct Stop {
    Outcome& out;
    const std::string& stage;
    std::chrono::steady_clock::time_point start;
    ~Stop() {
      out.doc["timings"][stage] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
  } stop{out, stage, start};
  return f();
}

inline double cond_bound(const Options& o) { return o.no_cond_bound ? 1e10 : kDefaultConditionBound; }

// ---------------------------------------------------------------------------
// Input resolution.

inline std::optional<DensityContext> load_rho(const Inputs& in) {
  auto it = in.find("rho");
  if (it == in.end()) return std::nullopt;
  return decode(it->second, [](const json& j) { return density_from_json(unwrap(j, "rho")); });
}

inline std::optional<Superoperator> load_superop(const Inputs& in, const std::string& role, const std::string& key) {
  auto it = in.find(role);
  if (it == in.end()) return std::nullopt;
  return decode(it->second, [&](const json& j) { return superop_from_json(unwrap(j, key)); });
}

/** (rho, Psi) from files or from the seeded ensemble. Psi is empty when only a generator is given. */
struct Problem {
  std::optional<DensityContext> ctx;
  std::optional<Superoperator> psi;
  std::optional<Superoperator> gen;
};

inline Problem resolve_problem(const Options& o, const Inputs& in, Outcome& out) {
  Problem p;
  p.ctx = load_rho(in);
  p.psi = load_superop(in, "psi", "psi");
  p.gen = load_superop(in, "gen", "generator");
  if (!p.ctx && o.seed) {
    if (!o.n) throw InputError("--n is required with --seed");
    const Instance inst = random_instance(*o.n, *o.seed, o.kraus_rank, cond_bound(o), tol_or(o, kDefaultTol));
    p.ctx = inst.ctx;
    if (!p.psi && !p.gen) p.psi = inst.psi;
    out.doc["instance"] = {{"n", *o.n}, {"seed", *o.seed}, {"kraus_rank", o.kraus_rank},
                           {"rho", density_to_json(inst.ctx)}, {"psi", superop_to_json(inst.psi)}};
  } else if (p.ctx && o.seed && !p.psi && !p.gen) {
    const Instance inst = random_instance(*p.ctx, *o.seed, o.kraus_rank);
    p.psi = inst.psi;
    out.doc["instance"] = {{"seed", *o.seed}, {"kraus_rank", o.kraus_rank}, {"psi", superop_to_json(inst.psi)}};
  }
  if (!p.ctx) throw InputError("a density matrix is required: pass --rho FILE or --seed/--n");
  return p;
}

inline MarkovGenerator problem_generator(const Problem& p, double tol) {
  if (p.gen) return MarkovGenerator::certify(*p.gen, *p.ctx, tol);
  if (p.psi) return generator_from_cp(*p.psi, *p.ctx, tol);
  throw InputError("a generator is required: pass --gen FILE, --psi FILE or --seed");
}

// ---------------------------------------------------------------------------
// Commands.

inline void cmd_check(const Options& o, const Inputs& in, Outcome& out) {
  const double tol = tol_or(o, kDefaultTol);
  const auto ctx = load_rho(in);
  const auto psi = load_superop(in, "psi", "psi");
  const auto gen = load_superop(in, "gen", "generator");
  if (!psi && !gen) throw InputError("check needs --psi FILE or --gen FILE");
  if (psi) {
    Report cp = is_cp(*psi, tol);
    cp.name = "cp";
    cp.metrics["hermiticity_defect"] = hermiticity_defect(*psi);
    add_report(out, cp);
    if (ctx && psi->level() == Level::Algebra) {
      Report s = is_kms_symmetric(*psi, *ctx, tol);
      s.name = "kms_symmetric";
      add_report(out, s);
    }
    if (ctx && psi->level() == Level::L2) {
      Report m = is_markov_l2(*psi, *ctx, tol);
      m.name = "markov_l2";
      add_report(out, m);
    }
  }
  if (gen) {
    if (!ctx) throw InputError("checking a generator needs --rho FILE");
    const MarkovGenerator g = MarkovGenerator::unverified(*gen, *ctx);
    Report u = g.unital_kernel(), k = g.kms_symmetric(), c = g.ccn();
    k.name = "generator_kms_symmetric";
    add_report(out, u);
    add_report(out, k);
    add_report(out, c);
  }
}

inline void cmd_vtransform(const Options& o, const Inputs& in, Outcome& out) {
  const double tol = tol_or(o, 1e-10);
  const auto s = load_superop(in, "psi", "psi");
  if (!s) throw InputError("vtransform needs --psi FILE (any superoperator)");
  std::optional<DensityContext> ctx = load_rho(in);
  if (!ctx) {
    ctx = DensityContext::maximally_mixed(s->dim());
    out.doc["notes"].push_back("no --rho given; using the maximally mixed state");
  }
  const Superoperator v = v_transform(*s, *ctx);
  Report r("vtransform", tol);
  r.pass = true;
  const double nrm = s->norm();
  const double inv = (w_transform(v, *ctx) - *s).norm();
  r.metrics["inverse_pair_defect"] = inv;
  r.metrics["input_op_norm"] = op_norm(s->mat());
  r.metrics["output_op_norm"] = op_norm(v.mat());
  r.require("inverse_pair", inv <= scaled_tol(tol, nrm));
  r.require("contraction", op_norm(v.mat()) <= op_norm(s->mat()) * (1.0 + 1e-12) + 1e-14);
  if (o.quadrature) {
    const double rmax = quadrature_range(*ctx);
    const QuadratureResult q = v_transform_quadrature(*s, *ctx, rmax, quadrature_steps(*ctx, rmax));
    const double dev = op_norm(q.value.mat() - v.mat()) / std::max(1e-300, op_norm(s->mat()));
    r.metrics["quadrature_deviation"] = dev;
    r.metrics["quadrature_tail_bound"] = q.tail_bound;
    r.metrics["quadrature_error_estimate"] = q.error_estimate;
    r.require("quadrature_agreement", dev <= 1e-6 && q.tail_bound <= 1e-8);
  }
  add_report(out, r);
  out.doc["results"]["superoperator"] = superop_to_json(v);
  out.doc["artifact"] = superop_to_json(v);
}

inline void cmd_gen_from_cp(const Options& o, const Inputs& in, Outcome& out) {
  const double tol = tol_or(o, kDefaultTol);
  Problem p = resolve_problem(o, in, out);
  if (!p.psi) throw InputError("gen-from-cp needs --psi FILE or --seed");
  const MarkovGenerator g = generator_from_cp(*p.psi, *p.ctx, tol);
  add_report(out, g.unital_kernel());
  add_report(out, g.kms_symmetric());
  add_report(out, g.ccn());
  out.doc["results"]["generator"] = superop_to_json(g.L());
  out.doc["artifact"] = superop_to_json(g.L());
}

inline void cmd_recover_cp(const Options& o, const Inputs& in, Outcome& out) {
  const double tol = tol_or(o, kDefaultTol);
  Problem p = resolve_problem(o, in, out);
  const MarkovGenerator g = problem_generator(p, tol);
  const RecoveryMethod m = o.recovery == "dykstra" ? RecoveryMethod::AlternatingProjection : RecoveryMethod::Schur;
  const RecoveryResult res = recover_cp_from_generator(g, 5000, tol, m);
  add_report(out, res.report);
  out.doc["results"]["psi"] = superop_to_json(res.psi);
  out.doc["artifact"] = superop_to_json(res.psi);
}

inline void derive_one(const Options& o, const Problem& p, Outcome& out) {
  const double tol = tol_or(o, 1e-7);
  const MarkovGenerator g = problem_generator(p, kDefaultTol);
  const DensityContext& ctx = *p.ctx;
  const bool gns = o.method == "gns" || o.method == "both";
  const bool kraus = o.method == "kraus" || o.method == "both";
  std::optional<FirstOrderCalculus> cg, ck;
  json fams = json::object();
  if (gns) {
    cg = timed(out, "gns_calculus", [&] { return gns_calculus(g); });
    Report inv = timed(out, "gns_invariants", [&] { return calculus_invariants(*cg, ctx, 1e-9); });
    inv.name = "gns_invariants";
    inv.metrics["form_identity_defect"] = form_identity_defect(*cg, g);
    inv.metrics["gram_min_eig"] = cg->gram_min_eig;
    inv.metrics["gram_norm"] = cg->gram_norm;
    inv.metrics["rank_cutoff"] = cg->rank_cutoff;
    add_report(out, inv);
    const CommutatorFamily f = timed(out, "gns_extraction", [&] { return extract_commutators_gns(*cg, ctx); });
    Report vr = verify_commutator_form(f, g, tol);
    vr.name = "gns_commutator_form";
    add_report(out, vr);
    const InnerVector iv = timed(out, "inner_vector", [&] { return inner_vector(*cg, ctx); });
    Report ir("inner_vector", 1e-7);
    ir.pass = true;
    ir.metrics["residual"] = iv.residual;
    ir.require("residual", iv.residual <= 1e-7);
    add_report(out, ir);
    fams["gns"] = family_to_json(f);
    out.doc["results"]["dimH"] = cg->dimH;
    out.doc["results"]["multiplicity"] = cg->dimH / std::max(1, ctx.dim() * ctx.dim());
  }
  if (kraus) {
    Superoperator psi = p.psi ? *p.psi : recover_cp_from_generator(g).psi;
    const CommutatorFamily f = timed(out, "kraus_extraction", [&] { return extract_commutators_kraus(g, psi); });
    Report vr = verify_commutator_form(f, g, tol);
    vr.name = "kraus_commutator_form";
    add_report(out, vr);
    Report ap = sum_identities(f, psi, ctx, 1e-8);
    add_report(out, ap);
    ck = timed(out, "kraus_calculus", [&] { return commutator_calculus(f, ctx); });
    Report inv = timed(out, "kraus_invariants", [&] { return calculus_invariants(*ck, ctx, 1e-9); });
    inv.name = "kraus_invariants";
    inv.metrics["form_identity_defect"] = form_identity_defect(*ck, g);
    add_report(out, inv);
    fams["kraus"] = family_to_json(f);
  }
  if (cg && ck) {
    const UniquenessWitness w = timed(out, "uniqueness", [&] { return uniqueness_witness(*cg, *ck, g, 1e-6); });
    add_report(out, w.report);
  }
  out.doc["results"]["families"] = fams;
  json art = gns ? fams["gns"] : fams["kraus"];
  if (gns && kraus) art["kraus"] = fams["kraus"];
  out.doc["artifact"] = art;
}

inline bool parse_seed_range(const std::string& s, std::uint64_t& lo, std::uint64_t& hi) {
  const std::size_t dots = s.find("..");
  if (dots == std::string::npos) return false;
  try {
    lo = std::stoull(s.substr(0, dots));
    hi = std::stoull(s.substr(dots + 2));
  } catch (const std::exception&) {
    return false;
  }
  return lo <= hi;
}

int exit_for(const Error& e);

/** Runs one command per seed in a..b, concurrently, each in its own Outcome. */
template <typename F>
inline void batch(const Options& o, Outcome& out, F&& body) {
  std::uint64_t lo = 0, hi = 0;
  if (!parse_seed_range(o.seeds, lo, hi)) throw InputError("--seeds expects a..b with a <= b");
  const unsigned width = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::future<Outcome>> pending;
  json runs = json::array();
  int worst = kPass;
  auto drain = [&]() {
    for (auto& f : pending) {
      Outcome r = f.get();
      runs.push_back(r.doc);
      worst = std::max(worst, r.exit);
    }
    pending.clear();
  };
  for (std::uint64_t s = lo; s <= hi; ++s) {
    Options each = o;
    each.seed = s;
    each.seeds.clear();
    pending.push_back(std::async(std::launch::async, [each, &body]() {
      Outcome r;
      r.doc["seed"] = *each.seed;
      try {
        body(each, r);
      } catch (const Error& e) {
        r.doc["error"] = {{"code", to_string(e.code())}, {"message", e.what()}};
        r.exit = exit_for(e);
      }
      r.doc["pass"] = r.exit == kPass;
      return r;
    }));
    if (pending.size() >= width) drain();
  }
  drain();
  out.doc["results"]["runs"] = runs;
  out.exit = worst;
}

inline void cmd_derive(const Options& o, const Inputs& in, Outcome& out) {
  if (o.method != "gns" && o.method != "kraus" && o.method != "both")
    throw InputError("--method must be gns, kraus or both");
  if (!o.seeds.empty()) {
    batch(o, out, [&in](const Options& each, Outcome& r) { derive_one(each, resolve_problem(each, in, r), r); });
    return;
  }
  const Problem p = resolve_problem(o, in, out);
  derive_one(o, p, out);
}

inline void cmd_verify_family(const Options& o, const Inputs& in, Outcome& out) {
  const double tol = tol_or(o, 1e-7);
  const Problem p = resolve_problem(o, in, out);
  const MarkovGenerator g = problem_generator(p, kDefaultTol);
  const CommutatorFamily f = decode(in.at("family"), [](const json& j) { return family_from_json(j); });
  const Report r = verify_commutator_form(f, g, tol);
  add_report(out, r);
  out.doc["results"]["deviation"] = io::grid(commutator_form_deviation(f, g.L(), g.ctx()));
}

inline void cmd_uniqueness(const Options& o, const Inputs& in, Outcome& out) {
  const double tol = tol_or(o, 1e-6);
  const Problem p = resolve_problem(o, in, out);
  const MarkovGenerator g = problem_generator(p, kDefaultTol);
  const FirstOrderCalculus a = gns_calculus(g);
  FirstOrderCalculus b;
  if (in.count("gen2")) {
    // Negative control: the second calculus comes from another generator.
    const auto g2 = load_superop(in, "gen2", "generator");
    b = gns_calculus(MarkovGenerator::certify(*g2, *p.ctx));
  } else {
    const Superoperator psi = p.psi ? *p.psi : recover_cp_from_generator(g).psi;
    b = commutator_calculus(extract_commutators_kraus(g, psi), *p.ctx);
  }
  try {
    const UniquenessWitness w = uniqueness_witness(a, b, g, tol);
    add_report(out, w.report);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::GramMismatch) throw;
    add_report(out, e.report());
    out.doc["error"] = {{"code", to_string(e.code())}, {"message", e.what()}};
  }
}

inline void cmd_simulate(const Options& o, const Inputs& in, Outcome& out) {
  const Problem p = resolve_problem(o, in, out);
  const MarkovGenerator g = problem_generator(p, kDefaultTol);
  if (o.steps < 1) throw InputError("--steps must be >= 1");
  const double coarse = chernoff_residual(g, o.t, o.steps);
  const double fine = chernoff_residual(g, o.t, 8 * o.steps);
  Report r("chernoff", 1e-12);
  r.pass = true;
  r.metrics["residual_coarse"] = coarse;
  r.metrics["residual_fine"] = fine;
  r.metrics["ratio"] = coarse > 0 ? fine / coarse : 0.0;
  r.require("converging", fine <= 1e-12 || fine <= 0.25 * coarse);
  add_report(out, r);
  out.doc["results"]["semigroup"] = superop_to_json(evolve(g, o.t));
  out.doc["artifact"] = superop_to_json(evolve(g, o.t));
}

inline void cmd_dirichlet(const Options& o, const Inputs& in, Outcome& out) {
  const double tol = tol_or(o, 1e-8);
  const Problem p = resolve_problem(o, in, out);
  const MarkovGenerator g = problem_generator(p, kDefaultTol);
  const DensityContext& ctx = g.ctx();
  const std::uint64_t seed = o.seed.value_or(0);
  add_report(out, dirichlet_contraction_check(g, o.trials, tol, seed));

  Report cyc("cyclic_vector", 1e-10);
  cyc.pass = true;
  const double e0 = dirichlet_energy(g, ctx.rho_half());
  cyc.metrics["energy"] = e0;
  cyc.require("annihilated", std::abs(e0) <= scaled_tol(1e-10, std::max(1.0, g.L2().norm())));
  add_report(out, cyc);

  Report prod("energy_product", tol);
  prod.pass = true;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  double slack = std::numeric_limits<double>::infinity();
  for (int k = 0; k < o.trials; ++k) {
    const Report r = energy_product_inequality(g, random_ginibre(ctx.dim(), ctx.dim(), rng),
                                               random_ginibre(ctx.dim(), ctx.dim(), rng), tol);
    slack = std::min(slack, r.metric("slack"));
    prod.require("inequality", r.pass && prod.pass);
  }
  prod.metrics["min_slack"] = slack;
  add_report(out, prod);

  Report mono("et_monotone", 1e-10);
  mono.pass = true;
  double worst = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < 5; ++k) {
    const Matrix a = random_ginibre(ctx.dim(), ctx.dim(), rng);
    double prev = -std::numeric_limits<double>::infinity();
    for (double t : {1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001}) {
      const double e = et_energy(g, a, t);
      worst = std::max(worst, prev - e);
      prev = e;
    }
  }
  mono.metrics["max_decrease"] = worst;
  mono.require("monotone", worst <= 1e-10);
  add_report(out, mono);
}

inline void random_one(const Options& o, const Inputs& in, Outcome& out) {
  std::optional<DensityContext> ctx = load_rho(in);
  int n = o.n.value_or(0);
  std::uint64_t seed = o.seed.value_or(0);
  int rank = o.kraus_rank;
  auto cfg = in.find("config");
  if (cfg != in.end()) {
    decode(cfg->second, [&](const json& j) {
      n = io::int_field(j, "n");
      if (!o.seed) seed = io::field(j, "seed").get<std::uint64_t>();
      if (j.contains("kraus_rank")) rank = io::int_field(j, "kraus_rank");
      if (j.contains("rho") && !(j["rho"].is_string() && j["rho"] == "random")) ctx = density_from_json(j["rho"]);
      return 0;
    });
  }
  if (!ctx && n == 0) throw InputError("random needs --n (or a config file)");
  const Instance inst = ctx ? random_instance(*ctx, seed, rank)
                            : random_instance(n, seed, rank, cond_bound(o), tol_or(o, kDefaultTol));
  Report cp = is_cp(inst.psi, inst.ctx.tol());
  cp.name = "psi_cp";
  add_report(out, cp);
  Report sym = is_kms_symmetric(inst.psi, inst.ctx, inst.ctx.tol());
  sym.name = "psi_kms_symmetric";
  add_report(out, sym);
  const json bundle = {{"n", inst.ctx.dim()},
                       {"seed", inst.seed},
                       {"kraus_rank", inst.kraus_rank},
                       {"condition", inst.ctx.condition()},
                       {"rho", density_to_json(inst.ctx)},
                       {"psi", superop_to_json(inst.psi)}};
  out.doc["results"]["instance"] = bundle;
  out.doc["artifact"] = bundle;
}

inline void cmd_random(const Options& o, const Inputs& in, Outcome& out) {
  if (!o.seeds.empty()) {
    batch(o, out, [&in](const Options& each, Outcome& r) { random_one(each, in, r); });
    return;
  }
  random_one(o, in, out);
}

// ---------------------------------------------------------------------------
// Driver.

inline int exit_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::NotHermitian:
    case ErrorCode::NotPositiveDefinite:
    case ErrorCode::WrongLevel:
    case ErrorCode::EmptyKrausList:
      return kInputError;
    case ErrorCode::Infeasible:
      return kInfeasible;
    default:
      return kCertificationFailure;
  }
}

Outcome execute(const Options& o, const Inputs& in);

inline void cmd_verify(const Options& o, const Inputs& in, Outcome& out) {
  auto rep = in.find("report");
  if (rep == in.end()) {
    if (!in.count("family")) throw InputError("verify needs --report FILE or --family FILE");
    cmd_verify_family(o, in, out);
    return;
  }
  // Replays the recorded command on the recorded inputs and compares verdicts.
  const json& old = rep->second.value;
  const auto [command, replay_opts, replay_in] = decode(rep->second, [&](const json& j) {
    if (io::field(j, "schema_version") != kSchemaVersion)
      throw SchemaError("schema_version", std::string("unsupported schema_version, expected ") + kSchemaVersion);
    const std::string cmd = io::field(j, "command").get<std::string>();
    Options ro = options_from_json(cmd, io::field(j, "options"));
    Inputs ri;
    for (const auto& [role, value] : io::field(j, "inputs").items())
      ri[role] = JsonDocument{rep->second.path + "#inputs/" + role, value.dump(1), value};
    return std::make_tuple(cmd, ro, ri);
  });
  if (command == "verify" && replay_in.count("report"))
    throw InputError(rep->second.path + ":1:1: nested verify reports are not replayed");
  const Outcome fresh = execute(replay_opts, replay_in);
  json mismatches = json::array();
  if (old.value("pass", false) != fresh.doc.value("pass", false)) mismatches.push_back("pass");
  const json empty = json::object();
  const json& old_reports = old.contains("reports") ? old["reports"] : empty;
  const json& new_reports = fresh.doc.contains("reports") ? fresh.doc["reports"] : empty;
  for (const auto& [name, r] : old_reports.items()) {
    if (!new_reports.contains(name) || new_reports[name].value("pass", false) != r.value("pass", false))
      mismatches.push_back(name);
  }
  for (const auto& [name, r] : new_reports.items())
    if (!old_reports.contains(name)) mismatches.push_back(name);
  Report v("replay", 0.0);
  v.pass = true;
  v.metrics["mismatches"] = static_cast<double>(mismatches.size());
  v.require("verdicts_match", mismatches.empty());
  out.doc["reports"]["replay"] = report_to_json(v);
  out.doc["results"]["replayed_command"] = command;
  out.doc["results"]["mismatches"] = mismatches;
  out.doc["results"]["replay"] = fresh.doc;
  out.exit = mismatches.empty() ? fresh.exit : kCertificationFailure;
}

/** name -> tol of every report, so the thresholds travel with the verdicts. */
inline json collect_tolerances(const json& doc) {
  json t = json::object();
  if (doc.contains("reports"))
    for (const auto& [name, r] : doc["reports"].items()) t[name] = r.value("tol", 0.0);
  return t;
}

/** Runs one command on already-loaded inputs. Never throws for library or input errors. */
inline Outcome execute(const Options& o, const Inputs& in) {
  Outcome out;
  const auto start = std::chrono::steady_clock::now();
  out.doc["schema_version"] = kSchemaVersion;
  out.doc["command"] = o.command;
  out.doc["options"] = options_to_json(o);
  json inputs = json::object();
  for (const auto& [role, d] : in) inputs[role] = d.value;
  out.doc["inputs"] = inputs;
  out.doc["seeds"] = json::array();
  if (o.seed) out.doc["seeds"].push_back(*o.seed);
  if (!o.seeds.empty()) out.doc["seeds"] = o.seeds;
  out.doc["timings"] = json::object();
  try {
    if (o.command == "check") cmd_check(o, in, out);
    else if (o.command == "vtransform") cmd_vtransform(o, in, out);
    else if (o.command == "gen-from-cp") cmd_gen_from_cp(o, in, out);
    else if (o.command == "recover-cp") cmd_recover_cp(o, in, out);
    else if (o.command == "derive") cmd_derive(o, in, out);
    else if (o.command == "verify") cmd_verify(o, in, out);
    else if (o.command == "uniqueness") cmd_uniqueness(o, in, out);
    else if (o.command == "simulate") cmd_simulate(o, in, out);
    else if (o.command == "dirichlet-check") cmd_dirichlet(o, in, out);
    else if (o.command == "random") cmd_random(o, in, out);
    else throw InputError("unknown command " + o.command);
  } catch (const InputError& e) {
    out.doc["error"] = {{"code", "InputError"}, {"message", e.what()}};
    out.exit = kInputError;
  } catch (const Error& e) {
    out.doc["error"] = {{"code", to_string(e.code())}, {"message", e.what()}};
    if (e.has_report()) out.doc["reports"][e.report().name.empty() ? "failure" : e.report().name] = report_to_json(e.report());
    out.exit = exit_for(e);
  }
  out.doc["pass"] = out.exit == kPass;
  out.doc["exit_code"] = out.exit;
  out.doc["tolerances"] = collect_tolerances(out.doc);
  out.doc["timings"]["total_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

/** Entry point shared by the binary and the tests. args excludes the program name. */
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Certified numerics for KMS-symmetric quantum Markov generators"};
  app.require_subcommand(1);
  Options o;
  std::map<std::string, std::string> files;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--rho", o.rho, "density matrix JSON");
    sub->add_option("--psi", o.psi, "superoperator JSON (Psi, or the input map)");
    sub->add_option("--gen", o.gen, "generator JSON");
    sub->add_option("--seed", o.seed, "seed for the random instance");
    sub->add_option("--n", o.n, "dimension for the random instance")->check(CLI::PositiveNumber);
    sub->add_option("--kraus-rank", o.kraus_rank, "Kraus rank for the random instance");
    sub->add_option("--tol", o.tol, "tolerance override");
    sub->add_option("--out", o.out, "write the primary result JSON here");
    sub->add_flag("--no-cond-bound", o.no_cond_bound, "lift the condition bound of random rho");
  };
  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {{"check", "certify a superoperator or generator"},
                      {"vtransform", "apply the V-transform"},
                      {"gen-from-cp", "build the generator of a KMS-symmetric CP map"},
                      {"recover-cp", "recover a CP map Psi from a generator"},
                      {"derive", "derivation and commutator families"},
                      {"verify", "re-verify a report or a commutator family"},
                      {"uniqueness", "witness unitary equivalence of two calculi"},
                      {"simulate", "semigroup and Chernoff product"},
                      {"dirichlet-check", "Dirichlet form properties"},
                      {"random", "seeded random instance"}};
  for (const Sub& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    common(sub);
    const std::string name = s.name;
    if (name == "derive" || name == "random") sub->add_option("--seeds", o.seeds, "batch over seeds a..b");
    if (name == "derive") sub->add_option("--method", o.method, "gns|kraus|both")->check(CLI::IsMember({"gns", "kraus", "both"}));
    if (name == "recover-cp")
      sub->add_option("--method", o.recovery, "schur|dykstra")->check(CLI::IsMember({"schur", "dykstra"}));
    if (name == "verify") {
      sub->add_option("--report", o.report, "report JSON to replay");
      sub->add_option("--family", o.family, "commutator family JSON");
    }
    if (name == "uniqueness") sub->add_option("--gen2", o.gen2, "second generator (negative control)");
    if (name == "simulate") {
      sub->add_option("--t", o.t, "time");
      sub->add_option("--steps", o.steps, "Chernoff steps (compared against 8x as many)");
    }
    if (name == "dirichlet-check") sub->add_option("--trials", o.trials, "random vectors per property");
    if (name == "vtransform") sub->add_flag("--quadrature", o.quadrature, "cross-check against the integral");
    if (name == "random") sub->add_option("--config", o.config, "instance config JSON");
  }

  std::vector<std::string> argv_store{"kmsd"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : argv_store) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kPass;
  } catch (const CLI::ParseError& e) {
    err << "kmsd: " << e.what() << "\n";
    return kInputError;
  }
  o.command = app.get_subcommands().front()->get_name();

  Inputs in;
  try {
    const std::pair<const char*, const std::string*> roles[] = {
        {"rho", &o.rho},       {"psi", &o.psi},       {"gen", &o.gen},      {"gen2", &o.gen2},
        {"family", &o.family}, {"report", &o.report}, {"config", &o.config}};
    for (const auto& [role, path] : roles)
      if (!path->empty()) in[role] = read_json_file(*path);
  } catch (const InputError& e) {
    err << "kmsd: " << e.what() << "\n";
    Outcome bad;
    bad.doc = {{"schema_version", kSchemaVersion}, {"command", o.command}, {"pass", false},
               {"exit_code", kInputError}, {"error", {{"code", "InputError"}, {"message", e.what()}}}};
    out << bad.doc.dump(2) << "\n";
    return kInputError;
  }

  Outcome res = execute(o, in);
  if (res.exit == kInputError && res.doc.contains("error")) err << "kmsd: " << res.doc["error"]["message"].get<std::string>() << "\n";
  if (!o.out.empty() && res.doc.contains("artifact")) {
    std::ofstream f(o.out);
    f << res.doc["artifact"].dump(2) << "\n";
    if (!f) {
      err << "kmsd: cannot write " << o.out << "\n";
      return kInputError;
    }
  }
  res.doc.erase("artifact");
  out << res.doc.dump(2) << "\n";
  return res.exit;
}

}  // namespace kmsd::cli
