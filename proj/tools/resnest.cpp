// resnest: analyze | verify | bench | train | inspect-checkpoint

#include "resnest/analysis.hpp"
#include "resnest/checkpoint.hpp"
#include "resnest/training.hpp"
#include "resnest/verify.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace {

using namespace resnest;

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  std::string precision;
};

/// Turns leftover "--some-key value" / "--some-key=value" tokens into
/// (some_key, value) pairs.
KeyValues overrides_from(const std::vector<std::string>& extras) {
  KeyValues kv;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string token = extras[i];
    if (token.rfind("--", 0) != 0 || token.size() < 3) {
      throw ConfigError("unexpected argument '" + token + "'");
    }
    token = token.substr(2);
    std::string value;
    if (const auto eq = token.find('='); eq != std::string::npos) {
      value = token.substr(eq + 1);
      token = token.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("option '--" + token + "' needs a value");
      value = extras[++i];
    }
    std::replace(token.begin(), token.end(), '-', '_');
    kv.emplace_back(token, value);
  }
  return kv;
}

KeyValues gather_settings(const Common& common, const std::vector<std::string>& extras) {
  KeyValues kv;
  if (!common.config_path.empty()) kv = read_key_value_file(common.config_path);
  for (auto& item : overrides_from(extras)) kv.push_back(std::move(item));
  return kv;
}

NetworkConfig network_from(const KeyValues& kv) {
  NetworkConfig cfg;
  for (const auto& [key, value] : kv) {
    if (!apply_network_key(cfg, key, value)) throw ConfigError("unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

std::string precision_or(const Common& common, const std::string& fallback) {
  const std::string p = common.precision.empty() ? fallback : common.precision;
  if (p != "f32" && p != "f64") {
    throw ConfigError("precision must be f32 or f64, got '" + p + "'");
  }
  return p;
}

std::string hex64(std::uint64_t v) {
  char buffer[20];
  std::snprintf(buffer, sizeof buffer, "%016llx", static_cast<unsigned long long>(v));
  return buffer;
}

// ---------------------------------------------------------------------------

int cmd_analyze(const Common& common, const std::vector<std::string>& extras, Index size) {
  const auto cfg = network_from(gather_settings(common, extras));
  const auto report = describe_network(cfg, size, size);
  print_report(std::cout, report);
  std::cout << "# path\tparams\tmacs\n";
  print_machine_readable(std::cout, report);
  if (const auto ref = reference_for(cfg)) {
    const double params_m = double(report.total_params()) / 1e6;
    const double gmacs = double(report.total_macs()) / 1e9;
    const double dp = params_m / ref->params_millions - 1.0;
    const double dm = gmacs / ref->gmacs - 1.0;
    const bool at_224 = size == 224;
    const bool ok = std::abs(dp) <= ref->params_tolerance &&
                    (!at_224 || std::abs(dm) <= ref->gmacs_tolerance);
    char line[256];
    std::snprintf(line, sizeof line,
                  "reference %s: params %.3fM vs %.1fM (%+.2f%%, tol %.0f%%), macs %.3fG vs "
                  "%.2fG (%+.2f%%, tol %.0f%%%s) %s",
                  ref->name.c_str(), params_m, ref->params_millions, 100 * dp,
                  100 * ref->params_tolerance, gmacs, ref->gmacs, 100 * dm,
                  100 * ref->gmacs_tolerance, at_224 ? "" : ", reference is at 224",
                  ok ? "MATCH" : "MISMATCH");
    std::cout << line << "\n";
  }
  return kOk;
}

int cmd_verify(const std::string& suite, const Common& common, bool inject) {
  VerifyOptions options;
  options.seed = common.seed;
  options.inject_sign_flip = inject;
  const auto checks = run_suite(suite, options);
  print_checks(std::cout, checks);
  const auto failed = std::count_if(checks.begin(), checks.end(), [](auto& c) { return !c.passed; });
  std::cout << checks.size() - std::size_t(failed) << "/" << checks.size() << " checks passed\n";
  return failed == 0 ? kOk : kFailed;
}

template <typename Scalar>
void run_bench(const NetworkConfig& cfg, const Common& common, Index batch, Index size, Index reps,
               Index warmup, bool layouts) {
  Rng rng(common.seed, 0);
  Network<Scalar> net(cfg, rng);
  const auto stats = bench_forward(net, {batch, cfg.input_channels, size, size}, reps, warmup,
                                   common.seed);
  std::printf("config %s\n", cfg.describe().c_str());
  std::printf("precision %s batch %lld input %lldx%lld reps %lld warmup %lld seed %llu\n",
              sizeof(Scalar) == 4 ? "f32" : "f64", (long long)batch, (long long)size,
              (long long)size, (long long)reps, (long long)warmup,
              (unsigned long long)common.seed);
  std::printf("forward ms: min %.3f median %.3f mean %.3f\n", stats.min_ms, stats.median_ms,
              stats.mean_ms);
  std::printf("per-image ms %.3f\n", stats.per_image_ms);
  std::printf("logits hash %s (%s across reps)\n", hex64(stats.logits_hash).c_str(),
              stats.deterministic ? "identical" : "DIFFERENT");
  if (layouts && cfg.radix >= 1) {
    const auto block = plan_blocks(cfg).front();
    const Index hw = size / 4;
    const auto lb = bench_splat_layouts<Scalar>(block.splat(), {batch, block.in_channels, hw, hw},
                                                reps, common.seed);
    std::printf("splat %s: radix-major median %.3f ms, cardinality-major median %.3f ms\n",
                block.name.c_str(), lb.radix_major.median_ms, lb.cardinality_major.median_ms);
  }
}

int cmd_bench(const Common& common, const std::vector<std::string>& extras, Index batch,
              Index size, Index reps, Index warmup, bool layouts) {
  const auto cfg = network_from(gather_settings(common, extras));
  if (reps < 1) throw ConfigError("reps must be >= 1");
  if (warmup < 0) throw ConfigError("warmup must be >= 0");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (size < kMinInputSize) throw ConfigError("size must be >= 32");
  if (precision_or(common, "f32") == "f32") {
    run_bench<float>(cfg, common, batch, size, reps, warmup, layouts);
  } else {
    run_bench<double>(cfg, common, batch, size, reps, warmup, layouts);
  }
  return kOk;
}

template <typename Scalar>
int run_train(const TrainConfig& cfg, const Common& common, const std::string& resume,
              const std::string& log_path, Index stop_after) {
  Trainer<Scalar> trainer(cfg);
  std::ostringstream log;
  log << "# train precision=" << (sizeof(Scalar) == 4 ? "f32" : "f64") << " " << cfg.describe()
      << "\n";
  if (!resume.empty()) {
    trainer.resume(Checkpoint::load(resume));
    log << "# resumed at epoch " << trainer.completed_epochs() << "\n";
  }
  log << "# epoch\tloss\tacc\tlr\n";
  std::cout << log.str() << std::flush;
  std::ofstream file;
  if (!log_path.empty()) {
    file.open(log_path, std::ios::trunc);
    if (!file) throw ConfigError("cannot open log file '" + log_path + "'");
    file << log.str();
  }
  struct Tee : std::streambuf {
    std::ostream* a;
    std::ostream* b;
    int overflow(int c) override {
      if (c == EOF) return 0;
      a->put(char(c));
      if (b) b->put(char(c));
      return c;
    }
  } tee;
  tee.a = &std::cout;
  tee.b = file.is_open() ? &file : nullptr;
  std::ostream out(&tee);
  trainer.run(&out, stop_after);
  out.flush();
  if (!common.out.empty()) {
    trainer.save(common.out);
    std::cout << "# checkpoint " << common.out << " (epoch " << trainer.completed_epochs()
              << ")\n";
  }
  const auto& h = trainer.history();
  if (!h.empty()) std::cout << "# final accuracy " << h.back().accuracy << "\n";
  return kOk;
}

int cmd_train(const Common& common, const std::vector<std::string>& extras,
              const std::string& resume, const std::string& log_path, Index stop_after) {
  TrainConfig cfg;
  for (const auto& [key, value] : gather_settings(common, extras)) {
    if (!apply_train_key(cfg, key, value)) throw ConfigError("unknown key '" + key + "'");
  }
  if (common.seed_given) cfg.seed = common.seed;
  cfg.validate();
  if (precision_or(common, "f64") == "f32") {
    return run_train<float>(cfg, common, resume, log_path, stop_after);
  }
  return run_train<double>(cfg, common, resume, log_path, stop_after);
}

int cmd_inspect(const std::string& path) {
  const auto ckpt = Checkpoint::load(path);
  std::size_t values = 0;
  std::cout << "# name\tdtype\tshape\tfnv1a\n";
  for (const auto& e : ckpt.entries()) {
    std::visit(
        [&](const auto& t) {
          values += std::size_t(t.size());
          std::cout << e.name << "\t" << Checkpoint::dtype_name(e.value) << "\t"
                    << to_string(t.shape()) << "\t" << hex64(hash_tensor(t)) << "\n";
        },
        e.value);
  }
  std::cout << ckpt.size() << " tensors, " << values << " values, format version "
            << Checkpoint::kVersion << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ResNeSt Split-Attention networks: cost analysis, verification, benchmarks and "
               "desk-scale training"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "key=value configuration file");
    sub->add_option("--seed", common.seed, "random seed (default 0)")
        ->each([&](const std::string&) { common.seed_given = true; });
    sub->add_option("--out", common.out, "output path");
    sub->add_option("--precision", common.precision, "f32 or f64");
    sub->allow_extras();
  };

  Index size = 224;
  auto* analyze = app.add_subcommand("analyze", "parameter and multiply-accumulate report");
  add_common(analyze);
  analyze->add_option("--size", size, "input height and width (default 224)");

  std::string suite = "all";
  bool inject = false;
  auto* verify = app.add_subcommand("verify", "run verification suites");
  verify->add_option("suite", suite, "equivalence | gradcheck | attention | schedule | loss | all");
  verify->add_option("--seed", common.seed, "random seed (default 0)");
  verify->add_flag("--inject-sign-flip", inject, "negate a split weight in one path (must fail)");

  Index reps = 30, warmup = 5, batch = 1, bench_size = 224;
  bool layouts = false;
  auto* bench = app.add_subcommand("bench", "time eval-mode forward passes");
  add_common(bench);
  bench->add_option("--reps", reps, "timed repetitions (default 30)");
  bench->add_option("--warmup", warmup, "untimed warmup passes (default 5)");
  bench->add_option("--batch", batch, "batch size (default 1)");
  bench->add_option("--size", bench_size, "input height and width (default 224)");
  bench->add_flag("--layouts", layouts, "also time both Split-Attention layouts");

  std::string resume, log_path;
  Index stop_after = -1;
  auto* train = app.add_subcommand("train", "train on the synthetic two-class task");
  add_common(train);
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_option("--log", log_path, "also write the metric log to this file");
  train->add_option("--stop-after", stop_after, "stop once this many epochs are complete");

  std::string ckpt_path;
  auto* inspect = app.add_subcommand("inspect-checkpoint", "list the tensors of a checkpoint");
  inspect->add_option("path", ckpt_path, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*analyze) return cmd_analyze(common, analyze->remaining(), size);
    if (*verify) return cmd_verify(suite, common, inject);
    if (*bench) return cmd_bench(common, bench->remaining(), batch, bench_size, reps, warmup, layouts);
    if (*train) return cmd_train(common, train->remaining(), resume, log_path, stop_after);
    if (*inspect) return cmd_inspect(ckpt_path);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const TrainingError& e) {
    std::cerr << "training failed: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
