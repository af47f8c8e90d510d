// adaptor_cli: synth | pretrain | eval | inspect | import
//
// Exit codes: 0 success, 2 validation or parse error, 3 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "adaptor/adaptor.hpp"

namespace fs = std::filesystem;
using namespace adaptor;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 2;
constexpr int kExitNumeric = 3;

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json_file(const fs::path& path, std::string* raw = nullptr) {
  const auto text = slurp(path);
  if (raw) *raw = text;
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
}

// Output directories are append-only: an existing non-empty directory is
// only reused with --force.
void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw ConfigError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) {
      throw ConfigError(dir.string() + " is not empty; pass --force to overwrite");
    }
  }
  fs::create_directories(dir);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string spec;
  std::string out;
  bool force = false;
};

int cmd_synth(const SynthArgs& a) {
  std::string raw;
  const auto spec = synth_spec_from_json(parse_json_file(a.spec, &raw));
  spec.validate();
  prepare_out_dir(a.out, a.force);
  const auto splits = split_cache(gen_synthetic(spec), spec.seed);
  json files = json::object();
  for (const auto* c : {&splits.train, &splits.val, &splits.test}) {
    const std::string name = std::string(to_string(c->split)) + ".adpc";
    const auto bytes = encode_cache(*c);
    io::write_file(fs::path(a.out) / name, bytes);
    files[to_string(c->split)] = {{"path", name}, {"n_samples", c->n_samples}, {"crc32", io::crc32(bytes)}};
  }
  const json manifest = {{"spec", to_json(spec)}, {"split_seed", spec.seed}, {"files", files}};
  write_text(fs::path(a.out) / "manifest.json", manifest.dump(2) + "\n");
  std::cout << manifest.dump(2) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct PretrainArgs {
  std::string config;
  std::string cache;
  std::string val_cache;
  std::string out;
  std::string resume;
  bool force = false;
  bool quiet = false;
};

int cmd_pretrain(const PretrainArgs& a) {
  std::string raw;
  const auto rc = run_config_from_json(parse_json_file(a.config, &raw));
  const std::string cache_path = !a.cache.empty() ? a.cache : rc.train_cache.value_or("");
  if (cache_path.empty()) throw ConfigError("no training cache: pass --cache or set paths.train_cache");
  const std::string val_path = !a.val_cache.empty() ? a.val_cache : rc.val_cache.value_or("");

  TrainConfig config = rc.train;
  const auto cache = read_cache(cache_path);
  std::optional<EmbeddingCache> val;
  if (!val_path.empty()) val = read_cache(val_path);
  config.validate();
  check_cache_compat(config, cache);
  if (cache.split != Split::train) {
    throw ConfigError(std::string("pretrain expects a train-split cache, got ") + to_string(cache.split));
  }
  if (val) check_cache_compat(config, *val);
  prepare_out_dir(a.out, a.force);

  const bool deterministic = deterministic_from_env();
  std::vector<EpochMetrics> history;
  TrainState state;
  if (!a.resume.empty()) {
    auto ck = load_checkpoint(a.resume);
    if (ck.config.adaptor != config.adaptor) throw ConfigError("resume: adaptor config differs from checkpoint");
    if (ck.state.seed != config.seed) throw ConfigError("resume: seed differs from checkpoint");
    if (ck.state.epoch > config.epochs) {
      throw ConfigError("resume: checkpoint already has " + std::to_string(ck.state.epoch) + " epochs, config asks for " +
                        std::to_string(config.epochs));
    }
    state = std::move(ck.state);
    history = std::move(ck.metrics);
  } else {
    state = init_train_state(config);
  }

  const fs::path out(a.out);
  write_text(out / "config.json", raw);
  std::ofstream log(out / "metrics.jsonl", std::ios::trunc);
  for (const auto& m : history) log << m.to_json().dump() << "\n";
  log.flush();

  auto on_epoch = [&](const EpochMetrics& m) {
    log << m.to_json().dump() << "\n";
    log.flush();
    if (!a.quiet) {
      std::cerr << "epoch " << m.epoch << " step " << m.step << " loss " << m.loss << " tau " << m.tau << "\n";
    }
  };
  auto fresh = train_epochs(state, config, cache, val ? &*val : nullptr, deterministic, on_epoch);
  history.insert(history.end(), fresh.begin(), fresh.end());

  save_checkpoint({config, state, history}, out / "checkpoint.adpk");
  json summary = {{"checkpoint", (out / "checkpoint.adpk").string()},
                  {"epochs", state.epoch},
                  {"steps", state.step},
                  {"param_count", param_count(config.adaptor)},
                  {"parameter_crc32", parameter_checksum(state.params)}};
  if (!history.empty()) summary["final_loss"] = history.back().loss;
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string cache;
  std::string train_cache;
  std::string probe_config;
  std::string out;
  std::optional<double> fraction;
};

int cmd_eval(const EvalArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  const auto cache = read_cache(a.cache);
  std::optional<EmbeddingCache> train;
  if (!a.train_cache.empty()) train = read_cache(a.train_cache);
  ProbeConfig probe;
  if (!a.probe_config.empty()) {
    const auto j = parse_json_file(a.probe_config);
    probe = probe_config_from_json(j.contains("probe") ? j.at("probe") : j);
  }
  if (a.fraction) probe.data_fraction = *a.fraction;
  probe.validate();
  const auto& ac = ck.config.adaptor;
  if (cache.d_img != ac.d_img || cache.d_txt != ac.d_txt) {
    throw ConfigError("cache dims (d_img=" + std::to_string(cache.d_img) + ", d_txt=" + std::to_string(cache.d_txt) +
                      ") do not match checkpoint (d_img=" + std::to_string(ac.d_img) +
                      ", d_txt=" + std::to_string(ac.d_txt) + ")");
  }
  if (train && (train->d_img != ac.d_img || train->d_txt != ac.d_txt)) {
    throw ConfigError("--train-cache dims do not match checkpoint");
  }
  const auto report = evaluate(ck.state.params, cache, probe, train ? &*train : nullptr);
  const auto text = report.to_json().dump(2) + "\n";
  if (!a.out.empty()) write_text(a.out, text);
  std::cout << text;
  return kExitOk;
}

// ---------------------------------------------------------------------------

std::string magic_of(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) return {};
  return std::string(bytes.begin(), bytes.begin() + 4);
}

int inspect_cache(std::span<const std::uint8_t> bytes) {
  json j = {{"format", "ADPC"}, {"bytes", bytes.size()}};
  io::Reader r(bytes);
  const auto h = parse_cache_header(r);
  j["version"] = h.version;
  j["n_samples"] = h.n_samples;
  j["d_img"] = h.d_img;
  j["d_txt"] = h.d_txt;
  j["tokens_img"] = h.tokens_img;
  j["tokens_txt"] = h.tokens_txt;
  j["has_labels"] = h.has_labels;
  j["split"] = to_string(h.split);
  int rc = kExitOk;
  try {
    const auto cache = decode_cache(bytes);
    j["checksum"] = "OK";
    if (cache.labels) j["n_classes"] = cache.n_classes();
  } catch (const ParseError& e) {
    j["checksum"] = e.kind() == ParseErrorKind::checksum_mismatch ? "FAIL" : "n/a";
    j["error"] = {{"kind", to_string(e.kind())}, {"message", e.what()}};
    rc = kExitInvalid;
  }
  std::cout << j.dump(2) << "\n";
  return rc;
}

int inspect_checkpoint(std::span<const std::uint8_t> bytes) {
  json j = {{"format", "ADPK"}, {"bytes", bytes.size()}};
  int rc = kExitOk;
  try {
    const auto ck = decode_checkpoint(bytes);
    j["checksum"] = "OK";
    j["config"] = to_json(ck.config);
    j["epoch"] = ck.state.epoch;
    j["step"] = ck.state.step;
    j["seed"] = ck.state.seed;
    j["tau"] = ck.state.params.tau();
    j["param_count"] = param_count(ck.config.adaptor);
    j["param_count_stored"] = ck.state.params.scalar_count();
    j["parameter_crc32"] = parameter_checksum(ck.state.params);
    j["metrics_records"] = ck.metrics.size();
  } catch (const ParseError& e) {
    j["checksum"] = e.kind() == ParseErrorKind::checksum_mismatch ? "FAIL" : "n/a";
    j["error"] = {{"kind", to_string(e.kind())}, {"message", e.what()}};
    rc = kExitInvalid;
  }
  std::cout << j.dump(2) << "\n";
  return rc;
}

int cmd_inspect(const std::string& path) {
  const auto bytes = io::read_file(path);
  const auto magic = magic_of(bytes);
  if (magic == "ADPC") return inspect_cache(bytes);
  if (magic == "ADPK") return inspect_checkpoint(bytes);
  throw ParseError(ParseErrorKind::bad_magic, path + ": not an ADPC cache or ADPK checkpoint");
}

// ---------------------------------------------------------------------------

struct ImportArgs {
  std::string input;
  std::string out;
  std::string split = "train";
};

int cmd_import(const ImportArgs& a) {
  Split split = Split::train;
  if (a.split == "val") {
    split = Split::val;
  } else if (a.split == "test") {
    split = Split::test;
  } else if (a.split != "train") {
    throw ConfigError("--split must be train, val or test");
  }
  const auto cache = read_text_import(a.input, split);
  write_cache(cache, a.out);
  std::cout << json{{"out", a.out}, {"n_samples", cache.n_samples}, {"d_img", cache.d_img}, {"d_txt", cache.d_txt},
                    {"has_labels", cache.labels.has_value()}}
                   .dump(2)
            << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Adaptor pre-training over cached frozen-encoder embeddings"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate synthetic train/val/test caches and a manifest");
  s->add_option("--spec", synth.spec, "SynthSpec JSON file")->required();
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_flag("--force", synth.force, "overwrite a non-empty output directory");

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "contrastive pre-training of the adaptor");
  p->add_option("--config", pre.config, "run config JSON")->required();
  p->add_option("--cache", pre.cache, "train-split ADPC cache (overrides paths.train_cache)");
  p->add_option("--val-cache", pre.val_cache, "validation ADPC cache for per-epoch val_loss");
  p->add_option("--out", pre.out, "output directory")->required();
  p->add_option("--resume", pre.resume, "checkpoint to continue from");
  p->add_flag("--force", pre.force, "overwrite a non-empty output directory");
  p->add_flag("--quiet", pre.quiet, "no per-epoch progress on stderr");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "frozen-adaptor retrieval, separability and probe evaluation");
  e->add_option("--checkpoint", ev.checkpoint, "ADPK checkpoint")->required();
  e->add_option("--cache", ev.cache, "evaluation ADPC cache")->required();
  e->add_option("--train-cache", ev.train_cache, "labelled cache for training the probe head");
  e->add_option("--probe-config", ev.probe_config, "ProbeConfig JSON (or run config with a probe section)");
  e->add_option("--fraction", ev.fraction, "labelled data fraction for the probe (0, 1]");
  e->add_option("--out", ev.out, "also write the report to this path");

  std::string inspect_path;
  auto* in = app.add_subcommand("inspect", "print header fields and integrity of a cache or checkpoint");
  in->add_option("--path", inspect_path, "ADPC or ADPK file")->required();

  ImportArgs imp;
  auto* im = app.add_subcommand("import", "convert a text embedding export into an ADPC cache");
  im->add_option("--input", imp.input, "text file: 'id label|- img floats | txt floats' per line")->required();
  im->add_option("--out", imp.out, "output ADPC path")->required();
  im->add_option("--split", imp.split, "train, val or test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*p) return cmd_pretrain(pre);
    if (*e) return cmd_eval(ev);
    if (*in) return cmd_inspect(inspect_path);
    if (*im) return cmd_import(imp);
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return kExitNumeric;
  } catch (const ParseError& err) {
    std::cerr << "parse error (" << to_string(err.kind()) << "): " << err.what() << "\n";
    return kExitInvalid;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitInvalid;
  } catch (const json::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitInvalid;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitInvalid;
  }
  return kExitInvalid;
}
