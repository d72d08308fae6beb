#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cnncert/certifier.hpp"
#include "cnncert/fixtures.hpp"
#include "cnncert/log.hpp"
#include "cnncert/reference.hpp"

#ifndef CNNCERT_FIXTURE_DIR
#define CNNCERT_FIXTURE_DIR "fixtures"
#endif

namespace cnncert::cli {

namespace {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// Failure to open or parse a model/input file.
struct InputError : Error {
  using Error::Error;
};

struct TargetMode {
  enum Kind { Untargeted, Targeted, RunnerUp, LeastLikely } kind = Untargeted;
  std::size_t target = 0;

  [[nodiscard]] std::string name() const {
    switch (kind) {
      case Targeted: return "targeted:" + std::to_string(target);
      case RunnerUp: return "runner-up";
      case LeastLikely: return "least-likely";
      default: return "untargeted";
    }
  }
};

std::optional<TargetMode> parse_mode(const std::string& text) {
  if (text == "untargeted") return TargetMode{};
  if (text == "runner-up") return TargetMode{TargetMode::RunnerUp, 0};
  if (text == "least-likely") return TargetMode{TargetMode::LeastLikely, 0};
  const std::string prefix = "targeted:";
  if (text.rfind(prefix, 0) == 0 && text.size() > prefix.size()) {
    const std::string digits = text.substr(prefix.size());
    if (std::all_of(digits.begin(), digits.end(), [](unsigned char ch) { return std::isdigit(ch) != 0; }) &&
        digits.size() < 10) {
      return TargetMode{TargetMode::Targeted, static_cast<std::size_t>(std::stoul(digits))};
    }
  }
  return std::nullopt;
}

// Picks the target for one input; nullopt means untargeted.
std::optional<std::size_t> resolve_target(const TargetMode& mode, const Tensor& logits, std::size_t c) {
  if (mode.kind == TargetMode::Untargeted) return std::nullopt;
  if (mode.kind == TargetMode::Targeted) return mode.target;
  std::optional<std::size_t> pick;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    if (t == c) continue;
    if (!pick || (mode.kind == TargetMode::RunnerUp ? logits[t] > logits[*pick] : logits[t] < logits[*pick])) pick = t;
  }
  if (!pick) throw Error("model has a single class; no target to certify against");
  return pick;
}

NetworkSpec read_model(const std::string& path) {
  try {
    return load_model_file(path);
  } catch (const Error& e) {
    throw InputError(path + ": " + e.what());
  }
}

std::vector<InputRecord> read_inputs(const std::string& path) {
  try {
    auto inputs = load_inputs_file(path);
    if (inputs.empty()) throw Error("no inputs found");
    return inputs;
  } catch (const Error& e) {
    throw InputError(path + ": " + e.what());
  }
}

Json nullable(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

// Runs `task(i)` for i in [0, n) on up to `jobs` threads.
template <class Task>
void parallel_for(std::size_t n, std::size_t jobs, Task&& task) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) task(i);
    });
  }
  for (auto& t : pool) t.join();
}

class Output {
 public:
  Output(const std::string& path, std::ostream& fallback) : stream_(&fallback) {
    if (!path.empty() && path != "-") {
      file_.open(path);
      if (!file_) throw InputError("cannot open output file " + path);
      stream_ = &file_;
    }
  }
  void line(const Json& j) { *stream_ << j.dump() << '\n'; }

 private:
  std::ofstream file_;
  std::ostream* stream_;
};

struct CertifyArgs {
  std::string model, inputs, norm = "inf", mode = "untargeted", relax = "relu-adaptive", margin = "difference", out;
  double rel_tol = 1e-3, eps_init = 0.005, max_eps = 10.0;
  int max_iters = 30;
  std::size_t jobs = 0, attack_budget = 0;
  std::uint64_t seed = 0;
};

int cmd_certify(const CertifyArgs& a, std::ostream& out, std::ostream& err) {
  const auto mode = parse_mode(a.mode);
  if (!mode) {
    err << "error: --mode must be untargeted, targeted:<class>, runner-up or least-likely\n";
    return kExitUsage;
  }
  CertifyOptions options;
  options.relu = parse_relu_relaxation(a.relax);
  options.margin = parse_margin_form(a.margin);
  options.rel_tol = a.rel_tol;
  options.max_iters = a.max_iters;
  options.eps_init = a.eps_init;
  options.max_eps = a.max_eps;
  try {
    options.validate();
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  const NormOrder p = parse_norm(a.norm);
  const NetworkSpec net = read_model(a.model);
  const std::vector<InputRecord> inputs = read_inputs(a.inputs);
  Output sink(a.out, out);

  const std::size_t jobs = a.jobs > 0 ? a.jobs : std::max(1u, std::thread::hardware_concurrency());
  std::vector<Json> records(inputs.size());
  std::vector<std::optional<double>> radii(inputs.size()), seconds(inputs.size());
  parallel_for(inputs.size(), jobs, [&](std::size_t i) {
    Json rec;
    rec["input"] = i;
    rec["relax"] = a.relax;
    rec["norm"] = to_string(p);
    rec["mode"] = mode->name();
    try {
      const auto start = std::chrono::steady_clock::now();
      const Tensor& x = inputs[i].x;
      const Tensor logits = forward(net, x);
      const std::size_t c = predicted_class(logits);
      const auto target = resolve_target(*mode, logits, c);
      const CertificationResult r = certified_radius(net, x, p, target, options);
      rec["predicted"] = c;
      if (inputs[i].label) {
        rec["label"] = *inputs[i].label;
        rec["correct"] = static_cast<long>(c) == *inputs[i].label;
      }
      rec["target"] = target ? Json(*target) : Json(nullptr);
      rec["binding_target"] = r.binding_target;
      rec["margin_form"] = to_string(options.margin);
      rec["radius"] = r.radius;
      rec["never_certified"] = r.never_certified;
      rec["reached_max_eps"] = r.reached_max_eps;
      rec["iterations"] = r.iterations;
      rec["bound_evaluations"] = r.bound_evaluations;
      rec["cache_hits"] = r.cache_hits;
      if (a.attack_budget > 0) {
        rec["attack_upper_bound"] = nullable(attack_upper_bound(net, x, p, a.attack_budget, a.seed + i, a.max_eps));
      }
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      rec["seconds"] = secs;
      radii[i] = r.radius;
      seconds[i] = secs;
      logger()->info("input {}: class {} radius {:.6g} after {} bound evaluations", i, c, r.radius,
                     r.bound_evaluations);
    } catch (const std::exception& e) {
      rec["error"] = e.what();
      logger()->error("input {}: {}", i, e.what());
    }
    records[i] = std::move(rec);
  });

  std::size_t ok = 0;
  double radius_sum = 0.0, seconds_sum = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    sink.line(records[i]);
    if (radii[i]) {
      ++ok;
      radius_sum += *radii[i];
      seconds_sum += *seconds[i];
    }
  }
  Json agg;
  agg["inputs"] = records.size();
  agg["certified"] = ok;
  agg["failed"] = records.size() - ok;
  agg["norm"] = to_string(p);
  agg["mode"] = mode->name();
  agg["relax"] = a.relax;
  agg["mean_radius"] = ok > 0 ? Json(radius_sum / static_cast<double>(ok)) : Json(nullptr);
  agg["mean_seconds"] = ok > 0 ? Json(seconds_sum / static_cast<double>(ok)) : Json(nullptr);
  sink.line(Json{{"aggregate", agg}});
  return ok == records.size() ? kExitOk : kExitPartialFailure;
}

struct AttackArgs {
  std::string model, inputs, norm = "inf", out;
  double eps = 0.0;
  std::size_t budget = 2000;
  std::uint64_t seed = 0;
};

int cmd_attack(const AttackArgs& a, std::ostream& out) {
  const NormOrder p = parse_norm(a.norm);
  const NetworkSpec net = read_model(a.model);
  const std::vector<InputRecord> inputs = read_inputs(a.inputs);
  Output sink(a.out, out);
  std::size_t found = 0, failed = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Json rec;
    rec["input"] = i;
    rec["norm"] = to_string(p);
    rec["eps"] = a.eps;
    rec["budget"] = a.budget;
    rec["seed"] = a.seed + i;
    try {
      const AttackResult r = sample_attack(net, inputs[i].x, p, a.eps, a.budget, a.seed + i);
      rec["predicted"] = r.predicted;
      rec["found"] = r.found();
      rec["adversarial_class"] = r.found() ? Json(r.adversarial_class) : Json(nullptr);
      rec["delta_norm"] = r.found() ? Json(dual_norm(r.delta->data(), p)) : Json(nullptr);
      rec["best_margin"] = r.best_margin;
      rec["evaluations"] = r.evaluations;
      found += r.found() ? 1 : 0;
    } catch (const std::exception& e) {
      rec["error"] = e.what();
      ++failed;
    }
    sink.line(rec);
  }
  sink.line(Json{{"aggregate", {{"inputs", inputs.size()}, {"found", found}, {"failed", failed}}}});
  return failed == 0 ? kExitOk : kExitPartialFailure;
}

struct SelfcheckArgs {
  std::string fixtures = CNNCERT_FIXTURE_DIR;
  std::optional<std::size_t> layer;
  std::size_t samples = 200;
  double eps = 0.05;
  std::uint64_t seed = 0;
};

bool close_rel(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max({std::abs(a), std::abs(b), 1e-9});
}

int cmd_selfcheck(const SelfcheckArgs& a, std::ostream& out) {
  constexpr double kSandwichTol = 1e-7;
  constexpr double kDenseTol = 1e-6;
  if (!fs::is_directory(a.fixtures)) throw InputError("fixture directory " + a.fixtures + " not found");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(a.fixtures)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::size_t checks = 0, failures = 0, models = 0;
  auto report = [&](bool pass, const std::string& what) {
    ++checks;
    if (!pass) ++failures;
    out << (pass ? "ok   " : "FAIL ") << what << '\n';
  };
  for (const fs::path& file : files) {
    const std::string name = file.filename().string();
    NetworkSpec net;
    try {
      net = load_model_file(file.string());
    } catch (const Error& model_error) {
      try {
        load_inputs_file(file.string());
        continue;  // an input file, not a model
      } catch (const Error&) {
        report(false, name + " load: " + model_error.what());
        continue;
      }
    }
    ++models;
    const Tensor x0 = random_input(net.input_shape, a.seed);
    for (NormOrder p : {NormOrder::L1, NormOrder::L2, NormOrder::Linf}) {
      const std::string tag = name + " p=" + to_string(p);
      try {
        std::vector<SandwichReport> reps;
        if (a.layer) {
          if (*a.layer > net.blocks.size()) {
            out << "skip " << tag << " (no layer " << *a.layer << ")\n";
            continue;
          }
          reps.push_back(sandwich_check(net, LayerRef{*a.layer, false}, x0, a.eps, p, a.samples, a.seed));
        } else {
          reps = sandwich_check_all(net, x0, a.eps, p, a.samples, a.seed);
        }
        for (const SandwichReport& r : reps) {
          report(r.max_violation <= kSandwichTol,
                 tag + " sandwich layer " + to_string(r.layer) + " max violation " + std::to_string(r.max_violation));
        }
        if (net.has_maxpool()) continue;
        const DenseNetwork dense = to_dense(net);
        for (ReluRelaxation relu : {ReluRelaxation::FastLin, ReluRelaxation::Adaptive}) {
          const IntervalBounds conv = output_bounds(net, x0, a.eps, p, relu);
          const IntervalBounds ref = dense_bounds(dense, x0, a.eps, p, relu);
          bool same = true;
          for (std::size_t i = 0; i < conv.size(); ++i) {
            same = same && close_rel(conv.lower[i], ref.lower[i], kDenseTol) &&
                   close_rel(conv.upper[i], ref.upper[i], kDenseTol);
          }
          report(same, tag + " dense equivalence " + to_string(relu));
        }
      } catch (const std::exception& e) {
        report(false, tag + ": " + e.what());
      }
    }
  }
  out << "selfcheck: " << models << " models, " << checks << " checks, " << failures << " failures\n";
  return failures == 0 && models > 0 ? kExitOk : kExitCheckFailed;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Certified robustness radii for convolutional networks"};
  app.require_subcommand(1);
  const std::vector<std::string> norms{"1", "2", "inf"};
  const std::vector<std::string> relaxes{"relu-fastlin", "relu-adaptive", "smooth"};

  CertifyArgs ca;
  auto* certify = app.add_subcommand("certify", "Certify a robustness radius for every input");
  certify->add_option("--model", ca.model, "Model JSON")->required();
  certify->add_option("--inputs", ca.inputs, "Input JSON (object, array or JSON lines)")->required();
  certify->add_option("--norm", ca.norm, "Perturbation norm")->check(CLI::IsMember(norms));
  certify->add_option("--mode", ca.mode, "untargeted, targeted:<class>, runner-up or least-likely");
  certify->add_option("--relax", ca.relax, "Relaxation family")->check(CLI::IsMember(relaxes));
  certify->add_option("--margin", ca.margin, "Margin bound")->check(CLI::IsMember({"difference", "separate"}));
  certify->add_option("--rel-tol", ca.rel_tol, "Relative bisection tolerance");
  certify->add_option("--max-iters", ca.max_iters, "Bisection step limit");
  certify->add_option("--eps-init", ca.eps_init, "First radius tried");
  certify->add_option("--max-eps", ca.max_eps, "Largest radius searched");
  certify->add_option("--jobs", ca.jobs, "Worker threads (0: all cores)");
  certify->add_option("--attack-budget", ca.attack_budget, "Samples per attack probe (0 disables)");
  certify->add_option("--seed", ca.seed, "Attack seed");
  certify->add_option("--out", ca.out, "Report path (default stdout)");

  AttackArgs aa;
  auto* attack = app.add_subcommand("attack", "Search for a class flip by sampling the ball");
  attack->add_option("--model", aa.model, "Model JSON")->required();
  attack->add_option("--inputs", aa.inputs, "Input JSON")->required();
  attack->add_option("--norm", aa.norm, "Perturbation norm")->check(CLI::IsMember(norms));
  attack->add_option("--eps", aa.eps, "Ball radius")->required()->check(CLI::NonNegativeNumber);
  attack->add_option("--budget", aa.budget, "Random samples")->check(CLI::PositiveNumber);
  attack->add_option("--seed", aa.seed, "Random seed");
  attack->add_option("--out", aa.out, "Report path (default stdout)");

  SelfcheckArgs sa;
  auto* selfcheck = app.add_subcommand("selfcheck", "Sandwich and dense-oracle checks over the fixtures");
  selfcheck->add_option("--fixtures", sa.fixtures, "Fixture directory");
  selfcheck->add_option("--layers", sa.layer, "Restrict sandwich checks to this layer");
  selfcheck->add_option("--samples", sa.samples, "Samples per check")->check(CLI::PositiveNumber);
  selfcheck->add_option("--eps", sa.eps, "Ball radius")->check(CLI::PositiveNumber);
  selfcheck->add_option("--seed", sa.seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (certify->parsed()) return cmd_certify(ca, out, err);
    if (attack->parsed()) return cmd_attack(aa, out);
    return cmd_selfcheck(sa, out);
  } catch (const InputError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNoInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitPartialFailure;
  }
}

}  // namespace cnncert::cli
