// polycert — certify feed-forward / convolutional / residual relu networks
// against L-infinity input perturbations.
//
// Subcommands:
//   verify        analyze a batch of inputs, one JSONL record per input
//   bench         same analyses, CSV of runtime and early-termination stats
//   gen           generate a seeded model (and optionally inputs) from an
//                 architecture string
//   oracle-check  cross-check the exact-rational engine against the dense
//                 reference analyzer
//
// Report formats are documented in docs/report_formats.md; the model format
// in docs/model_format.md.

#include <chrono>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "polycert/analyzer.hpp"
#include "polycert/gen.hpp"
#include "polycert/interval.hpp"
#include "polycert/network.hpp"
#include "polycert/oracle.hpp"
#include "polycert/threadpool.hpp"

namespace {

using nlohmann::ordered_json;
using namespace polycert;

struct RunConfig {
  std::string model;
  std::string inputs;
  std::string epsilon;
  std::string mode = "widened";  // widened | rational
  bool no_early_term = false;
  long long chunk_rows = 0;
  long long memory_budget = 1ll << 30;
  int workers = 1;
  std::string out;  // empty: stdout
  bool no_clamp = false;

  AnalysisOptions analysis() const {
    AnalysisOptions o;
    o.early_term = !no_early_term;
    o.chunk_rows = chunk_rows;
    o.memory_budget = memory_budget;
    // Images are dispatched to the CLI worker pool; each analysis runs its
    // rows on one thread to avoid oversubscription.
    o.workers = 1;
    return o;
  }
};

void add_run_flags(CLI::App* cmd, RunConfig& cfg) {
  cmd->add_option("--model", cfg.model, "model file (JSON)")->required();
  cmd->add_option("--inputs", cfg.inputs, "inputs file (CSV, one vector per line)")->required();
  cmd->add_option("--epsilon", cfg.epsilon, "perturbation radius (decimal)")->required();
  cmd->add_option("--mode", cfg.mode, "numeric mode: widened | rational")
      ->check(CLI::IsMember({"widened", "rational"}));
  cmd->add_flag("--no-early-term", cfg.no_early_term, "disable early termination");
  cmd->add_option("--chunk-rows", cfg.chunk_rows, "rows per chunk (0: derive from budget)");
  cmd->add_option("--memory-budget", cfg.memory_budget, "per-pass memory budget in bytes");
  cmd->add_option("--workers", cfg.workers, "images analyzed concurrently")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--out", cfg.out, "output file (default: stdout)");
  cmd->add_flag("--no-clamp", cfg.no_clamp, "do not clamp the input box to [0,1]");
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty()) return std::cout;
  file.open(path);
  if (!file) throw std::runtime_error("cannot open output file: " + path);
  return file;
}

// Strict argmax; nullopt when the maximum is attained twice (such an input is
// not correctly classified in a unique sense, so it is not a candidate).
template <class S>
std::optional<int> unique_argmax(const std::vector<S>& v) {
  int best = 0;
  bool tie = false;
  for (size_t j = 1; j < v.size(); ++j) {
    if (v[j] > v[best]) {
      best = static_cast<int>(j);
      tie = false;
    } else if (v[j] == v[best]) {
      tie = true;
    }
  }
  if (tie) return std::nullopt;
  return best;
}

struct PerInput {
  std::string line;
  bool failed = false;
};

template <class P>
std::vector<PerInput> run_batch(const RunConfig& cfg, bool bench) {
  using S = typename P::Scalar;
  const ModelDoc doc = load_model(cfg.model);
  const Network<P> net = instantiate<P>(doc);
  const auto rows = load_inputs(cfg.inputs);
  const S eps = scalar_from_decimal<S>(cfg.epsilon);
  const AnalysisOptions aopt = cfg.analysis();

  std::vector<PerInput> results(rows.size());
  parallel_for(static_cast<int>(rows.size()), cfg.workers, [&](int, int b, int e) {
    for (int i = b; i < e; ++i) {
      try {
        if (static_cast<int>(rows[i].size()) != net.input_shape.numel())
          throw std::runtime_error("input size mismatch");
        std::vector<S> center;
        center.reserve(rows[i].size());
        for (const std::string& t : rows[i]) center.push_back(scalar_from_decimal<S>(t));

        const auto acts = forward_eval(net, center);
        const std::optional<int> label = unique_argmax(acts.back());

        if (!label) {
          if (bench) {
            results[i].line = std::to_string(i) + ",0,0.000000";
          } else {
            ordered_json j;
            j["index"] = i;
            j["candidate"] = nullptr;
            j["verdict"] = "skipped";
            j["margins"] = ordered_json::array();
            j["runtime_ns"] = 0;
            j["rows_terminated"] = 0;
            results[i].line = j.dump();
          }
          continue;
        }

        const InputBox<P> box = input_box<P>(center, eps, !cfg.no_clamp);
        const auto t0 = std::chrono::steady_clock::now();
        const Verdict<P> v = verify_robustness(net, box, *label, aopt);
        const auto t1 = std::chrono::steady_clock::now();
        const long long ns =
            std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();

        if (bench) {
          const double frac =
              v.stats.rows_total > 0
                  ? static_cast<double>(v.stats.rows_terminated_early) /
                        static_cast<double>(v.stats.rows_total)
                  : 0.0;
          char buf[64];
          std::snprintf(buf, sizeof(buf), "%d,%lld,%.6f", i, ns, frac);
          results[i].line = buf;
        } else {
          ordered_json j;
          j["index"] = i;
          j["candidate"] = *label;
          j["verdict"] = v.verified ? "verified" : "unknown";
          ordered_json margins = ordered_json::array();
          for (const auto& [cls, low] : v.margins) {
            ordered_json m;
            m["class"] = cls;
            m["lower"] = scalar_to_double(low);
            margins.push_back(std::move(m));
          }
          j["margins"] = std::move(margins);
          j["runtime_ns"] = ns;
          j["rows_terminated"] = v.stats.rows_terminated_early;
          results[i].line = j.dump();
        }
      } catch (const std::exception& ex) {
        ordered_json j;
        j["index"] = i;
        j["error"] = ex.what();
        results[i].line = j.dump();
        results[i].failed = true;
      }
    }
  });
  return results;
}

int cmd_verify_or_bench(const RunConfig& cfg, bool bench) {
  std::vector<PerInput> results = cfg.mode == "rational"
                                      ? run_batch<ExactRational>(cfg, bench)
                                      : run_batch<WidenedFloat64>(cfg, bench);
  std::ofstream file;
  std::ostream& os = open_out(cfg.out, file);
  if (bench) os << "index,runtime_ns,early_term_fraction\n";
  bool failed = false;
  for (const PerInput& r : results) {
    os << r.line << "\n";
    failed = failed || r.failed;
  }
  return failed ? 1 : 0;
}

int cmd_gen(uint64_t seed, const std::string& arch, const std::string& out,
            const std::string& inputs_out, int n_inputs) {
  const ModelDoc doc = gen::generate(seed, arch);
  save_model(doc, out);
  if (!inputs_out.empty()) {
    const auto rows = gen::random_inputs(seed + 1, n_inputs, doc.input_shape.numel());
    std::ofstream f(inputs_out);
    if (!f) throw std::runtime_error("cannot open output file: " + inputs_out);
    for (const auto& row : rows) {
      for (size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
      f << "\n";
    }
  }
  return 0;
}

int cmd_oracle_check(const RunConfig& cfg, size_t max_neurons) {
  using Q = mpq_class;
  const ModelDoc doc = load_model(cfg.model);
  const Network<ExactRational> net = instantiate<ExactRational>(doc);
  const auto rows = load_inputs(cfg.inputs);
  const Q eps = rational_from_decimal(cfg.epsilon);
  const AnalysisOptions aopt = cfg.analysis();

  std::ofstream file;
  std::ostream& os = open_out(cfg.out, file);
  bool all_ok = true;
  for (size_t i = 0; i < rows.size(); ++i) {
    std::vector<Q> center;
    for (const std::string& t : rows[i]) center.push_back(rational_from_decimal(t));

    const auto acts = forward_eval(net, center);
    const std::optional<int> label = unique_argmax(acts.back());

    AnalysisResult<ExactRational> ar =
        analyze(net, input_box<ExactRational>(center, eps, !cfg.no_clamp), aopt);
    std::vector<Q> engine_margins;
    if (label) {
      PassStats ms;
      engine_margins =
          run_margin_pass(net, ar.state, *label, pass_options(aopt), ms);
    }

    const oracle::RefAnalysis ref = oracle::reference_analyze(
        doc, center, eps, !cfg.no_clamp, label ? *label : -1, max_neurons);

    std::string diff;
    for (size_t k = 0; k < net.layers.size() && diff.empty(); ++k)
      for (size_t j = 0; j < ar.state.bounds[k].size(); ++j)
        if (ar.state.bounds[k][j].lo != ref.bounds[k][j].lo ||
            ar.state.bounds[k][j].hi != ref.bounds[k][j].hi) {
          diff = "bounds differ at layer " + std::to_string(k) + " neuron " +
                 std::to_string(j);
          break;
        }
    if (diff.empty() && label)
      for (size_t r = 0; r < engine_margins.size(); ++r)
        if (engine_margins[r] != ref.margin_lows[r]) {
          diff = "margin " + std::to_string(r) + " differs";
          break;
        }

    if (diff.empty()) {
      os << "input " << i << ": match\n";
    } else {
      os << "input " << i << ": MISMATCH (" << diff << ")\n";
      all_ok = false;
    }
  }
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"polyhedral robustness certifier for relu networks"};
  app.require_subcommand(1);

  RunConfig vcfg;
  CLI::App* verify = app.add_subcommand("verify", "verify a batch of inputs (JSONL)");
  add_run_flags(verify, vcfg);

  RunConfig bcfg;
  CLI::App* bench = app.add_subcommand("bench", "runtime statistics per input (CSV)");
  add_run_flags(bench, bcfg);

  uint64_t gseed = 1;
  std::string garch, gout, ginputs_out;
  int gn_inputs = 20;
  CLI::App* gen_cmd = app.add_subcommand("gen", "generate a seeded model");
  gen_cmd->add_option("--seed", gseed, "generator seed")->required();
  gen_cmd->add_option("--arch", garch, "architecture string")->required();
  gen_cmd->add_option("--out", gout, "model output path")->required();
  gen_cmd->add_option("--inputs-out", ginputs_out, "also write a CSV of random inputs");
  gen_cmd->add_option("--inputs", gn_inputs, "how many input vectors for --inputs-out");

  RunConfig ocfg;
  size_t omax_neurons = 4000;
  CLI::App* ocheck =
      app.add_subcommand("oracle-check", "engine vs dense rational reference");
  add_run_flags(ocheck, ocfg);
  ocheck->add_option("--max-neurons", omax_neurons, "dense-reference size limit");

  CLI11_PARSE(app, argc, argv);

  try {
    if (verify->parsed()) return cmd_verify_or_bench(vcfg, /*bench=*/false);
    if (bench->parsed()) return cmd_verify_or_bench(bcfg, /*bench=*/true);
    if (gen_cmd->parsed()) return cmd_gen(gseed, garch, gout, ginputs_out, gn_inputs);
    if (ocheck->parsed()) return cmd_oracle_check(ocfg, omax_neurons);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 0;
}
