// Command-line surface for the swayflow library: synthetic corpus
// generation, training, inference, leak-and-override diagnostics, schedule
// inspection, and the self-check suites.
//
// Exit codes: 0 success, 1 check or inference failure, 2 usage error.
// Reports are line-oriented `key=value` text; numeric flags are echoed
// exactly as given so a run can be reproduced from its report.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "swayflow/verify.hpp"

namespace {

using namespace swayflow;
namespace fs = std::filesystem;

constexpr uint64_t kModelSeedSalt = 0x9e3779b97f4a7c15ULL;  // model init vs data stream
constexpr uint64_t kLeakSeedSalt = 0xc2b2ae3d27d4eb4fULL;   // leak synthesis stream

struct SamplerSettings {
  int64_t nfe = 32;
  std::string solver = "euler";
  double sway = -1.0;
  double cfg_alpha = 2.0;
};

struct RunPaths {
  std::string corpus;
  std::string checkpoint;
  std::string output;
};

struct RunConfig {
  ModelConfig model;
  TrainingConfig training;
  SamplerSettings sampler;
  RunPaths paths;
  nlohmann::json raw;  // as loaded, for presence queries
};

void apply_sampler_json(const nlohmann::json& j, SamplerSettings& s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "nfe")
      s.nfe = value.get<int64_t>();
    else if (key == "solver")
      s.solver = value.get<std::string>();
    else if (key == "sway")
      s.sway = value.get<double>();
    else if (key == "cfg_alpha")
      s.cfg_alpha = value.get<double>();
    else
      fail("sampler config: unknown key '", key, "'");
  }
}

void apply_paths_json(const nlohmann::json& j, RunPaths& p) {
  for (const auto& [key, value] : j.items()) {
    if (key == "corpus")
      p.corpus = value.get<std::string>();
    else if (key == "checkpoint")
      p.checkpoint = value.get<std::string>();
    else if (key == "output")
      p.output = value.get<std::string>();
    else
      fail("paths config: unknown key '", key, "'");
  }
}

// Config file: one JSON document with nested sections; unknown keys are
// rejected at every level. Flags given on the command line override it.
RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  std::ifstream in(path);
  if (!in) fail("cannot read config file ", path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail("config file ", path, ": ", e.what());
  }
  if (!j.is_object()) fail("config file ", path, ": top level must be an object");
  rc.raw = j;
  for (const auto& [key, value] : j.items()) {
    if (key == "model")
      rc.model = model_config_from_json(value, rc.model);
    else if (key == "training")
      rc.training = training_config_from_json(value, rc.training);
    else if (key == "sampler")
      apply_sampler_json(value, rc.sampler);
    else if (key == "paths")
      apply_paths_json(value, rc.paths);
    else
      fail("config file ", path, ": unknown key '", key, "'");
  }
  return rc;
}

// The raw string the user passed for a flag, or the resolved value when the
// flag was left at its default — reports must echo inputs verbatim.
std::string flag_echo(const CLI::Option* opt, const std::string& resolved) {
  if (opt && opt->count() > 0 && !opt->results().empty()) return opt->results().back();
  return resolved;
}

int usage_failure(const std::exception& e) {
  std::cerr << "usage error: " << e.what() << '\n';
  return 2;
}

int run_failure(const std::exception& e) {
  std::cerr << "error: " << e.what() << '\n';
  return 1;
}

// Writes the report to stdout and, when requested, to a file.
void emit_report(const std::vector<std::string>& lines, const std::string& report_path) {
  for (const auto& l : lines) std::cout << l << '\n';
  if (!report_path.empty()) {
    std::ofstream out(report_path);
    if (!out) fail("cannot write report file ", report_path);
    for (const auto& l : lines) out << l << '\n';
  }
}

// Duration-aware transcript decoding: repeatedly majority-vote a window the
// size of the favoured symbol's duration, emit it, and advance.
std::string decode_transcript(const CorpusRule& rule, const std::vector<double>& values,
                              int64_t frames) {
  const auto votes = nearest_symbols(rule, values, frames);
  std::string out;
  int64_t t = 0;
  while (t < frames) {
    int64_t s = votes[static_cast<std::size_t>(t)];
    for (int refine = 0; refine < 2; ++refine) {
      const int64_t d = std::min(rule.durations[static_cast<std::size_t>(s)], frames - t);
      std::vector<int64_t> counts(static_cast<std::size_t>(rule.n_symbols()), 0);
      for (int64_t i = t; i < t + d; ++i) ++counts[static_cast<std::size_t>(votes[static_cast<std::size_t>(i)])];
      s = std::max_element(counts.begin(), counts.end()) - counts.begin();
    }
    out.push_back(rule.symbols[static_cast<std::size_t>(s)]);
    t += std::min(rule.durations[static_cast<std::size_t>(s)], frames - t);
  }
  return out;
}

// ---------------------------------------------------------------- gen-corpus

struct GenCorpusArgs {
  std::string dir;
  int64_t count = 64;
  uint64_t seed = 0;
  int64_t feat_dim = 8;
  int64_t symbols = 16;
  double sigma = 0.05;
  int64_t min_len = 3;
  int64_t max_len = 10;
  bool force = false;
};

int cmd_gen_corpus(const GenCorpusArgs& a) {
  CorpusRule rule;
  try {
    rule = make_default_rule(a.seed, a.feat_dim, a.symbols, a.sigma);
    if (a.min_len < 1 || a.min_len > a.max_len)
      fail("string length range [", a.min_len, ", ", a.max_len, "] invalid");
    if (a.count < 0) fail("count must be >= 0");
    if (fs::exists(a.dir) && !fs::is_empty(a.dir) && !a.force)
      fail(a.dir, " exists and is not empty (pass --force to overwrite)");
  } catch (const std::exception& e) {
    return usage_failure(e);
  }
  try {
    auto corpus = generate_corpus(a.dir, a.count, rule, a.force, a.min_len, a.max_len);
    int64_t frames = 0;
    for (const auto& e : corpus.entries) frames += oracle_frames(rule, e.text);
    std::cout << "command=gen-corpus\ndir=" << a.dir << "\nseed=" << a.seed
              << "\ncount=" << corpus.entries.size() << "\ntotal_frames=" << frames
              << "\nfeat_dim=" << rule.feat_dim << "\nnoise_sigma=" << format_value(rule.noise_sigma)
              << "\nvocab_size=" << rule.n_symbols() + 1 << '\n';
    return 0;
  } catch (const std::exception& e) {
    return run_failure(e);
  }
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string corpus_dir;
  std::string out_dir;
  std::string config_path;
  std::string resume_path;
  int64_t updates = -1;  // -1: keep config value
  int64_t stop_at = 0;   // 0: run to total_updates
  uint64_t seed = 0;
  bool seed_given = false;
  int64_t log_every = 100;
};

template <class S>
int run_training(const TrainArgs& a, const ModelConfig& mc, const TrainingConfig& tc,
                 const Corpus& corpus) {
  try {
    fs::create_directories(a.out_dir);
    const std::string final_path = (fs::path(a.out_dir) / "final.ckpt").string();
    const std::string best_path = (fs::path(a.out_dir) / "best.ckpt").string();

    Rng model_rng(tc.seed ^ kModelSeedSalt);
    VectorFieldModel<S> model(mc, model_rng);
    Trainer<S> trainer(model, corpus, tc);
    if (!a.resume_path.empty()) load_checkpoint(a.resume_path, trainer);

    if (a.updates == 0) {
      save_checkpoint(final_path, trainer);
      std::cout << "command=train\nupdates_run=0\nfinal_checkpoint=" << final_path << '\n';
      return 0;
    }

    std::ofstream log((fs::path(a.out_dir) / "train_log.txt").string(),
                      a.resume_path.empty() ? std::ios::trunc : std::ios::app);
    if (!log) fail("cannot write training log under ", a.out_dir);

    const int64_t stop =
        a.stop_at > 0 ? std::min(a.stop_at, tc.total_updates) : tc.total_updates;
    double best_loss = std::numeric_limits<double>::infinity();
    int64_t ran = 0;
    while (trainer.update_count() < stop) {
      const auto stats = trainer.step();
      ++ran;
      log << "update " << stats.update << " loss " << format_value(stats.loss) << " lr "
          << format_value(stats.lr) << " grad_norm " << format_value(stats.grad_norm) << '\n';
      if (a.log_every > 0 && (stats.update % a.log_every == 0 || trainer.update_count() == stop))
        std::cout << "update " << stats.update << " loss " << format_value(stats.loss)
                  << " lr " << format_value(stats.lr) << " grad_norm "
                  << format_value(stats.grad_norm) << std::endl;
      if (stats.loss < best_loss) {
        best_loss = stats.loss;
        save_checkpoint(best_path, trainer);
      }
    }
    save_checkpoint(final_path, trainer);
    std::cout << "command=train\ncorpus=" << a.corpus_dir << "\nseed=" << tc.seed
              << "\nupdates_run=" << ran << "\ntotal_updates=" << trainer.update_count()
              << "\nbest_loss=" << format_value(best_loss)
              << "\nfinal_checkpoint=" << final_path << "\nbest_checkpoint=" << best_path
              << '\n';
    return 0;
  } catch (const std::exception& e) {
    return run_failure(e);  // includes divergence aborts from non-finite losses
  }
}

int cmd_train(const TrainArgs& a) {
  ModelConfig mc;
  TrainingConfig tc;
  Corpus corpus;
  try {
    corpus = load_corpus(a.corpus_dir);
    if (!a.resume_path.empty()) {
      const auto data = read_checkpoint(a.resume_path);
      mc = model_config_from_json(data.config.at("model"));
      tc = training_config_from_json(data.config.at("training"));
    } else {
      auto rc = load_run_config(a.config_path);
      mc = rc.model;
      tc = rc.training;
      const auto model_raw = rc.raw.contains("model") ? rc.raw["model"] : nlohmann::json::object();
      if (!model_raw.contains("feat_dim")) mc.feat_dim = corpus.rule.feat_dim;
      if (!model_raw.contains("vocab_size")) mc.vocab_size = corpus.rule.n_symbols() + 1;
    }
    if (a.updates > 0) tc.total_updates = a.updates;
    if (a.seed_given) tc.seed = a.seed;
    mc.validate();
    tc.validate();
  } catch (const std::exception& e) {
    return usage_failure(e);
  }
  if (tc.precision == "f64") return run_training<double>(a, mc, tc, corpus);
  return run_training<float>(a, mc, tc, corpus);
}

// --------------------------------------------------------------------- infer

struct InferArgs {
  std::string checkpoint;
  std::string corpus_dir;
  std::string config_path;
  std::string prompt_text;
  std::string prompt_features_path;
  std::string gen_text;
  std::string out_path;
  std::string report_path;
  SamplerSettings sampler;
  uint64_t seed = 0;
  int64_t duration = 0;  // generated frames; 0 = estimate from the prompt
  bool raw_weights = false;
  bool decode = false;
  // echo sources
  const CLI::Option *nfe_opt = nullptr, *solver_opt = nullptr, *sway_opt = nullptr,
                    *cfg_opt = nullptr, *seed_opt = nullptr, *duration_opt = nullptr;
};

struct LoadedRule {
  bool present = false;
  CorpusRule rule;
};

LoadedRule try_load_rule(const std::string& corpus_dir) {
  LoadedRule out;
  const fs::path p = fs::path(corpus_dir) / "rule.json";
  if (!fs::exists(p)) return out;
  std::ifstream in(p);
  nlohmann::json j;
  in >> j;
  out.rule = detail::rule_from_json(j);
  out.present = true;
  return out;
}

template <class S>
int run_inference(const InferArgs& a, const CheckpointData& data, const ModelConfig& mc) {
  try {
    const auto vocab = load_corpus_vocab(a.corpus_dir);
    const auto rule = try_load_rule(a.corpus_dir);
    Rng dummy(0);
    VectorFieldModel<S> model(mc, dummy);
    load_params_into(model, data, /*use_ema=*/!a.raw_weights);

    InferenceRequest<S> req;
    req.prompt_text = a.prompt_text;
    req.gen_text = a.gen_text;
    if (!a.prompt_features_path.empty())
      req.prompt_features = read_f32_tensor<S>(a.prompt_features_path);
    req.gen_frames = a.duration;
    req.nfe = a.sampler.nfe;
    req.solver = solver_from_name(a.sampler.solver);
    req.sway = a.sampler.sway;
    req.cfg_alpha = a.sampler.cfg_alpha;
    req.seed = a.seed;

    const auto res = infer(model, vocab, req);
    write_f32_file(a.out_path, res.features);

    std::vector<std::string> report;
    report.push_back("command=infer");
    report.push_back("checkpoint=" + a.checkpoint);
    report.push_back("corpus=" + a.corpus_dir);
    report.push_back("prompt_text=" + a.prompt_text);
    report.push_back("prompt_features=" + a.prompt_features_path);
    report.push_back("gen_text=" + a.gen_text);
    report.push_back("nfe=" + flag_echo(a.nfe_opt, std::to_string(a.sampler.nfe)));
    report.push_back("solver=" + flag_echo(a.solver_opt, a.sampler.solver));
    report.push_back("sway=" + flag_echo(a.sway_opt, format_value(a.sampler.sway)));
    report.push_back("cfg=" + flag_echo(a.cfg_opt, format_value(a.sampler.cfg_alpha)));
    report.push_back("seed=" + flag_echo(a.seed_opt, std::to_string(a.seed)));
    report.push_back("duration=" + flag_echo(a.duration_opt, std::to_string(a.duration)));
    report.push_back("weights=" + std::string(a.raw_weights ? "raw" : "ema"));
    report.push_back("prompt_frames=" + std::to_string(res.prompt_frames));
    report.push_back("gen_frames=" + std::to_string(res.gen_frames));
    report.push_back("realized_nfe=" + std::to_string(res.evals));
    report.push_back("output=" + a.out_path);
    if (a.decode) {
      if (!rule.present) fail("--decode needs rule.json in the corpus directory");
      std::vector<double> vals(res.features.data().begin(), res.features.data().end());
      report.push_back("decoded=" + decode_transcript(rule.rule, vals, res.gen_frames));
    }
    emit_report(report, a.report_path);
    return 0;
  } catch (const std::exception& e) {
    return run_failure(e);
  }
}

int cmd_infer(InferArgs a) {
  CheckpointData data;
  ModelConfig mc;
  std::string precision;
  try {
    auto rc = load_run_config(a.config_path);
    // config file fills gaps; explicit flags already sit in `a`
    if (a.checkpoint.empty()) a.checkpoint = rc.paths.checkpoint;
    if (a.corpus_dir.empty()) a.corpus_dir = rc.paths.corpus;
    if (a.out_path.empty()) a.out_path = rc.paths.output;
    if (!a.nfe_opt || a.nfe_opt->count() == 0) a.sampler.nfe = rc.sampler.nfe;
    if (!a.solver_opt || a.solver_opt->count() == 0) a.sampler.solver = rc.sampler.solver;
    if (!a.sway_opt || a.sway_opt->count() == 0) a.sampler.sway = rc.sampler.sway;
    if (!a.cfg_opt || a.cfg_opt->count() == 0) a.sampler.cfg_alpha = rc.sampler.cfg_alpha;
    if (a.checkpoint.empty()) fail("no checkpoint given (flag --checkpoint or paths.checkpoint)");
    if (a.corpus_dir.empty()) fail("no corpus given (flag --corpus or paths.corpus)");
    if (a.out_path.empty()) fail("no output path given (flag --out or paths.output)");
    if (a.gen_text.empty()) fail("--gen-text must not be empty");
    // schedule parameters must form a valid schedule before any heavy work
    build_schedule(a.sampler.nfe, a.sampler.sway, solver_from_name(a.sampler.solver),
                   a.sampler.cfg_alpha);
    data = read_checkpoint(a.checkpoint);
    mc = model_config_from_json(data.config.at("model"));
    precision = training_config_from_json(data.config.at("training")).precision;
  } catch (const std::exception& e) {
    return usage_failure(e);
  }
  if (precision == "f64") return run_inference<double>(a, data, mc);
  return run_inference<float>(a, data, mc);
}

// ------------------------------------------------------------- leak-override

struct LeakArgs {
  InferArgs base;
  std::string leak_text;
  std::string leak_features_path;
  double t_prime = 0.1;
};

template <class S>
int run_leak(const LeakArgs& la, const CheckpointData& data, const ModelConfig& mc) {
  const InferArgs& a = la.base;
  try {
    const auto vocab = load_corpus_vocab(a.corpus_dir);
    const auto rule = try_load_rule(a.corpus_dir);
    Rng dummy(0);
    VectorFieldModel<S> model(mc, dummy);
    load_params_into(model, data, /*use_ema=*/!a.raw_weights);

    InferenceRequest<S> req;
    req.prompt_text = a.prompt_text;
    req.gen_text = a.gen_text;
    if (!a.prompt_features_path.empty())
      req.prompt_features = read_f32_tensor<S>(a.prompt_features_path);
    req.gen_frames = a.duration;
    if (req.gen_frames == 0 && rule.present)
      req.gen_frames = oracle_frames(rule.rule, a.gen_text);
    req.nfe = a.sampler.nfe;
    req.solver = solver_from_name(a.sampler.solver);
    req.sway = a.sampler.sway;
    req.cfg_alpha = a.sampler.cfg_alpha;
    req.seed = a.seed;

    Tensor<S> leak_features;
    if (!la.leak_features_path.empty()) {
      leak_features = read_f32_tensor<S>(la.leak_features_path);
    } else {
      if (!rule.present)
        fail("--leak-text needs rule.json in the corpus directory (or pass --leak-features)");
      Rng leak_rng(a.seed ^ kLeakSeedSalt);
      auto noisy = sample_noisy_features(rule.rule, la.leak_text, leak_rng);
      std::vector<S> v(noisy.data().begin(), noisy.data().end());
      leak_features = Tensor<S>(noisy.shape(), std::move(v));
    }

    const auto res = infer_with_leak(model, vocab, req, leak_features, la.t_prime);
    write_f32_file(a.out_path, res.features);

    std::vector<std::string> report;
    report.push_back("command=leak-override");
    report.push_back("checkpoint=" + a.checkpoint);
    report.push_back("corpus=" + a.corpus_dir);
    report.push_back("prompt_text=" + a.prompt_text);
    report.push_back("gen_text=" + a.gen_text);
    report.push_back("leak_text=" + la.leak_text);
    report.push_back("leak_features=" + la.leak_features_path);
    report.push_back("t_prime=" + format_value(la.t_prime));
    report.push_back("nfe=" + flag_echo(a.nfe_opt, std::to_string(a.sampler.nfe)));
    report.push_back("solver=" + flag_echo(a.solver_opt, a.sampler.solver));
    report.push_back("sway=" + flag_echo(a.sway_opt, format_value(a.sampler.sway)));
    report.push_back("cfg=" + flag_echo(a.cfg_opt, format_value(a.sampler.cfg_alpha)));
    report.push_back("seed=" + flag_echo(a.seed_opt, std::to_string(a.seed)));
    report.push_back("duration=" + flag_echo(a.duration_opt, std::to_string(a.duration)));
    report.push_back("prompt_frames=" + std::to_string(res.prompt_frames));
    report.push_back("gen_frames=" + std::to_string(res.gen_frames));
    report.push_back("realized_nfe=" + std::to_string(res.evals));
    report.push_back("output=" + a.out_path);

    if (rule.present) {
      std::vector<double> vals(res.features.data().begin(), res.features.data().end());
      report.push_back("decoded=" + decode_transcript(rule.rule, vals, res.gen_frames));
      if (res.gen_frames == oracle_frames(rule.rule, a.gen_text))
        report.push_back("target_recovery=" +
                         format_value(symbol_recovery(rule.rule, a.gen_text, vals,
                                                      res.gen_frames)));
      if (!la.leak_text.empty()) {
        // per-frame agreement with the leaked content, tiled the way the
        // leak start-state was
        auto leak_clean = oracle_features(rule.rule, la.leak_text);
        const int64_t lf = leak_clean.dim(0);
        const auto votes = nearest_symbols(rule.rule, vals, res.gen_frames);
        const auto leak_votes = nearest_symbols(rule.rule, leak_clean.data(), lf);
        int64_t agree = 0;
        for (int64_t i = 0; i < res.gen_frames; ++i)
          if (votes[static_cast<std::size_t>(i)] ==
              leak_votes[static_cast<std::size_t>(i % lf)])
            ++agree;
        report.push_back("leak_frame_agreement=" +
                         format_value(static_cast<double>(agree) /
                                      static_cast<double>(res.gen_frames)));
      }
    }
    emit_report(report, a.report_path);
    return 0;
  } catch (const std::exception& e) {
    return run_failure(e);
  }
}

int cmd_leak_override(LeakArgs la) {
  CheckpointData data;
  ModelConfig mc;
  std::string precision;
  try {
    InferArgs& a = la.base;
    auto rc = load_run_config(a.config_path);
    if (a.checkpoint.empty()) a.checkpoint = rc.paths.checkpoint;
    if (a.corpus_dir.empty()) a.corpus_dir = rc.paths.corpus;
    if (a.out_path.empty()) a.out_path = rc.paths.output;
    if (!a.nfe_opt || a.nfe_opt->count() == 0) a.sampler.nfe = rc.sampler.nfe;
    if (!a.solver_opt || a.solver_opt->count() == 0) a.sampler.solver = rc.sampler.solver;
    if (!a.sway_opt || a.sway_opt->count() == 0) a.sampler.sway = rc.sampler.sway;
    if (!a.cfg_opt || a.cfg_opt->count() == 0) a.sampler.cfg_alpha = rc.sampler.cfg_alpha;
    if (a.checkpoint.empty()) fail("no checkpoint given (flag --checkpoint or paths.checkpoint)");
    if (a.corpus_dir.empty()) fail("no corpus given (flag --corpus or paths.corpus)");
    if (a.out_path.empty()) fail("no output path given (flag --out or paths.output)");
    if (la.leak_text.empty() && la.leak_features_path.empty())
      fail("give --leak-text or --leak-features");
    if (!(la.t_prime > 0.0 && la.t_prime < 1.0))
      fail("t_prime ", la.t_prime, " outside (0, 1)");
    build_schedule(a.sampler.nfe, a.sampler.sway, solver_from_name(a.sampler.solver),
                   a.sampler.cfg_alpha);
    data = read_checkpoint(a.checkpoint);
    mc = model_config_from_json(data.config.at("model"));
    precision = training_config_from_json(data.config.at("training")).precision;
  } catch (const std::exception& e) {
    return usage_failure(e);
  }
  if (precision == "f64") return run_leak<double>(la, data, mc);
  return run_leak<float>(la, data, mc);
}

// -------------------------------------------------------------------- verify

int cmd_verify(const std::string& suite, const std::string& scratch) {
  try {
    const auto& names = verify_suite_names();
    if (std::find(names.begin(), names.end(), suite) == names.end()) {
      std::string valid;
      for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
      fail("unknown verify suite '", suite, "' (valid: ", valid, ")");
    }
  } catch (const std::exception& e) {
    return usage_failure(e);
  }
  try {
    const auto checks = run_verify_suite(suite, scratch, &std::cout);
    const int failures = print_checks(checks, std::cout);
    std::cout << "suite=" << suite << " checks=" << checks.size() << " failures=" << failures
              << '\n';
    return failures == 0 ? 0 : 1;
  } catch (const std::exception& e) {
    return run_failure(e);
  }
}

// ------------------------------------------------------------------ schedule

int cmd_schedule(const SamplerSettings& s) {
  try {
    auto sched =
        build_schedule(s.nfe, s.sway, solver_from_name(s.solver), s.cfg_alpha);
    std::cout << "command=schedule\nnfe=" << s.nfe << "\nsolver=" << s.solver
              << "\nsway=" << format_value(s.sway) << "\ncfg=" << format_value(s.cfg_alpha)
              << "\nsegments=" << sched.segments() << "\nrealized_nfe=" << nfe_count(sched)
              << '\n';
    for (std::size_t i = 0; i < sched.steps.size(); ++i)
      std::cout << "step" << i << "=" << format_value(sched.steps[i]) << '\n';
    return 0;
  } catch (const std::exception& e) {
    return usage_failure(e);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flow-matching speech-infilling toolkit"};
  app.require_subcommand(1);

  GenCorpusArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "write a synthetic aligned corpus");
  gen_cmd->add_option("--dir", gen.dir, "output directory")->required();
  gen_cmd->add_option("--count", gen.count, "number of utterances");
  gen_cmd->add_option("--seed", gen.seed, "generative rule seed");
  gen_cmd->add_option("--feat-dim", gen.feat_dim, "feature channels per frame");
  gen_cmd->add_option("--symbols", gen.symbols, "alphabet size");
  gen_cmd->add_option("--sigma", gen.sigma, "per-element noise level");
  gen_cmd->add_option("--min-len", gen.min_len, "minimum symbols per utterance");
  gen_cmd->add_option("--max-len", gen.max_len, "maximum symbols per utterance");
  gen_cmd->add_flag("--force", gen.force, "overwrite a non-empty directory");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train the vector-field model");
  train_cmd->add_option("--corpus", train.corpus_dir, "corpus directory")->required();
  train_cmd->add_option("--out", train.out_dir, "output directory for checkpoints and logs")
      ->required();
  train_cmd->add_option("--config", train.config_path, "JSON config file");
  train_cmd->add_option("--resume", train.resume_path, "checkpoint to resume from");
  train_cmd->add_option("--updates", train.updates,
                        "total updates the schedule spans (0: write an initial checkpoint "
                        "and exit)");
  train_cmd->add_option("--stop-at", train.stop_at,
                        "pause once this many updates are done (resume later to finish)");
  auto* train_seed =
      train_cmd->add_option("--seed", train.seed, "training stream seed");
  train_cmd->add_option("--log-every", train.log_every, "stdout logging period (0: quiet)");

  InferArgs infer_args;
  auto* infer_cmd = app.add_subcommand("infer", "synthesize the continuation of a prompt");
  infer_cmd->add_option("--checkpoint", infer_args.checkpoint, "trained checkpoint");
  infer_cmd->add_option("--corpus", infer_args.corpus_dir,
                        "corpus directory (vocabulary, decoding rule)");
  infer_cmd->add_option("--config", infer_args.config_path, "JSON config file");
  infer_cmd->add_option("--prompt-text", infer_args.prompt_text, "transcript of the prompt");
  infer_cmd->add_option("--prompt-features", infer_args.prompt_features_path,
                        "prompt feature file (f32)");
  infer_cmd->add_option("--gen-text", infer_args.gen_text, "transcript to synthesize");
  infer_cmd->add_option("--out", infer_args.out_path, "output feature file (f32)");
  infer_cmd->add_option("--report", infer_args.report_path, "also write the report here");
  infer_args.nfe_opt = infer_cmd->add_option("--nfe", infer_args.sampler.nfe,
                                             "evaluation budget for integration");
  infer_args.solver_opt =
      infer_cmd->add_option("--solver", infer_args.sampler.solver, "euler|midpoint|heun3");
  infer_args.sway_opt =
      infer_cmd->add_option("--sway", infer_args.sampler.sway, "schedule warp coefficient");
  infer_args.cfg_opt =
      infer_cmd->add_option("--cfg", infer_args.sampler.cfg_alpha, "guidance strength");
  infer_args.seed_opt = infer_cmd->add_option("--seed", infer_args.seed, "noise seed");
  infer_args.duration_opt = infer_cmd->add_option(
      "--duration", infer_args.duration, "generated frames (0: estimate from the prompt)");
  infer_cmd->add_flag("--raw-weights", infer_args.raw_weights,
                      "use live weights instead of the averaged ones");
  infer_cmd->add_flag("--decode", infer_args.decode, "decode output symbols via the rule");

  LeakArgs leak;
  auto* leak_cmd = app.add_subcommand(
      "leak-override", "integrate from a partially leaked start state and compare decodes");
  leak_cmd->add_option("--checkpoint", leak.base.checkpoint, "trained checkpoint");
  leak_cmd->add_option("--corpus", leak.base.corpus_dir, "corpus directory");
  leak_cmd->add_option("--config", leak.base.config_path, "JSON config file");
  leak_cmd->add_option("--prompt-text", leak.base.prompt_text, "transcript of the prompt");
  leak_cmd->add_option("--prompt-features", leak.base.prompt_features_path,
                       "prompt feature file (f32)");
  leak_cmd->add_option("--gen-text", leak.base.gen_text, "target transcript")->required();
  leak_cmd->add_option("--leak-text", leak.leak_text,
                       "transcript whose features leak into the start state");
  leak_cmd->add_option("--leak-features", leak.leak_features_path,
                       "leaked feature file (f32), overrides --leak-text");
  leak_cmd->add_option("--t-prime", leak.t_prime, "flow step where integration begins");
  leak_cmd->add_option("--out", leak.base.out_path, "output feature file (f32)");
  leak_cmd->add_option("--report", leak.base.report_path, "also write the report here");
  leak.base.nfe_opt = leak_cmd->add_option("--nfe", leak.base.sampler.nfe,
                                           "evaluation budget for integration");
  leak.base.solver_opt =
      leak_cmd->add_option("--solver", leak.base.sampler.solver, "euler|midpoint|heun3");
  leak.base.sway_opt =
      leak_cmd->add_option("--sway", leak.base.sampler.sway, "schedule warp coefficient");
  leak.base.cfg_opt =
      leak_cmd->add_option("--cfg", leak.base.sampler.cfg_alpha, "guidance strength");
  leak.base.seed_opt = leak_cmd->add_option("--seed", leak.base.seed, "noise seed");
  leak.base.duration_opt = leak_cmd->add_option(
      "--duration", leak.base.duration,
      "generated frames (0: the rule's frame count for --gen-text)");
  leak_cmd->add_flag("--raw-weights", leak.base.raw_weights,
                     "use live weights instead of the averaged ones");

  std::string verify_suite;
  std::string verify_scratch =
      (fs::temp_directory_path() / "swayflow_verify").string();
  auto* verify_cmd = app.add_subcommand("verify", "run a self-check suite");
  verify_cmd->add_option("suite", verify_suite, "sway | solvers | gradcheck | identities | e2e")
      ->required();
  verify_cmd->add_option("--dir", verify_scratch, "scratch directory for file-backed checks");

  SamplerSettings sched;
  auto* sched_cmd = app.add_subcommand("schedule", "print the warped integration schedule");
  sched_cmd->add_option("--nfe", sched.nfe, "evaluation budget");
  sched_cmd->add_option("--solver", sched.solver, "euler|midpoint|heun3");
  sched_cmd->add_option("--sway", sched.sway, "schedule warp coefficient");
  sched_cmd->add_option("--cfg", sched.cfg_alpha, "guidance strength");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (gen_cmd->parsed()) return cmd_gen_corpus(gen);
  if (train_cmd->parsed()) {
    train.seed_given = train_seed->count() > 0;
    return cmd_train(train);
  }
  if (infer_cmd->parsed()) return cmd_infer(infer_args);
  if (leak_cmd->parsed()) return cmd_leak_override(leak);
  if (verify_cmd->parsed()) return cmd_verify(verify_suite, verify_scratch);
  if (sched_cmd->parsed()) return cmd_schedule(sched);
  return 2;
}
