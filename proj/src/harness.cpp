#include "lasro/harness.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <json.hpp>
#include <limits>
#include <set>
#include <sstream>
#include <tuple>

#ifndef LASRO_GIT_REVISION
#define LASRO_GIT_REVISION "unknown"
#endif

namespace lasro::harness {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

// Strict reader over one JSON object: typed lookups plus an unknown-key check.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object())
      throw ValidationError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  bool get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return false;
    convert(*it, join(path_, key), out);
    return true;
  }

  Reader section(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    auto it = j_.find(key);
    return Reader(it == j_.end() ? empty : *it, join(path_, key));
  }

  void done() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ValidationError(join(path_, it.key()), "unknown key");
  }

 private:
  static void convert(const json& v, const std::string& path, int& out) {
    long l = 0;
    convert(v, path, l);
    if (l < std::numeric_limits<int>::min() || l > std::numeric_limits<int>::max())
      throw ValidationError(path, "integer out of range");
    out = static_cast<int>(l);
  }
  static void convert(const json& v, const std::string& path, long& out) {
    if (!v.is_number_integer()) throw ValidationError(path, "expected an integer");
    out = v.get<long>();
  }
  static void convert(const json& v, const std::string& path, std::uint64_t& out) {
    if (!v.is_number_integer() ||
        (v.is_number_integer() && !v.is_number_unsigned() && v.get<long>() < 0))
      throw ValidationError(path, "expected a nonnegative integer");
    out = v.get<std::uint64_t>();
  }
  static void convert(const json& v, const std::string& path, double& out) {
    if (!v.is_number()) throw ValidationError(path, "expected a number");
    out = v.get<double>();
  }
  static void convert(const json& v, const std::string& path, bool& out) {
    if (!v.is_boolean()) throw ValidationError(path, "expected a boolean");
    out = v.get<bool>();
  }
  static void convert(const json& v, const std::string& path, std::string& out) {
    if (!v.is_string()) throw ValidationError(path, "expected a string");
    out = v.get<std::string>();
  }
  template <class T>
  static void convert(const json& v, const std::string& path, std::vector<T>& out) {
    if (!v.is_array()) throw ValidationError(path, "expected an array");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      T x{};
      convert(v[i], path + "[" + std::to_string(i) + "]", x);
      out.push_back(x);
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class F>
void check(const std::string& path, F&& fn) {
  try {
    fn();
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    throw ValidationError(path, e.what());
  }
}

void require_positive(const std::string& path, double v) {
  if (!(v > 0)) throw ValidationError(path, "must be positive");
}

RunConfig from_json(const json& root) {
  RunConfig cfg;
  Reader top(root, "");
  if (!top.get("schema_version", cfg.schema_version))
    throw ValidationError("schema_version", "missing required field");
  if (cfg.schema_version != kSchemaVersion)
    throw ValidationError("schema_version", "expected " + std::to_string(kSchemaVersion) +
                                                ", found " + std::to_string(cfg.schema_version));

  {
    auto s = top.section("dataset");
    auto& d = cfg.dataset;
    s.get("kind", d.kind);
    s.get("dim", d.dim);
    s.get("classes", d.classes);
    s.get("radius", d.radius);
    s.get("spread", d.spread);
    s.done();
    check("dataset.kind", [&] { diffusion::parse_dataset_kind(d.kind); });
    if (d.dim < 2 || d.dim > 16) throw ValidationError("dataset.dim", "must be in 2..16");
    if (d.classes < 1) throw ValidationError("dataset.classes", "must be >= 1");
    require_positive("dataset.spread", d.spread);
  }
  {
    auto s = top.section("schedule");
    auto& d = cfg.schedule;
    s.get("T", d.T);
    s.get("kind", d.kind);
    s.get("beta_min", d.beta_min);
    s.get("beta_max", d.beta_max);
    s.done();
    check("schedule", [&] {
      diffusion::make_schedule(d.T, diffusion::parse_schedule_kind(d.kind), d.beta_min, d.beta_max);
    });
  }
  {
    auto s = top.section("teacher");
    auto& d = cfg.teacher;
    s.get("hidden", d.hidden);
    s.get("blocks", d.blocks);
    s.get("time_features", d.time_features);
    s.get("class_features", d.class_features);
    auto& t = d.training;
    s.get("iters", t.iters);
    s.get("batch", t.batch);
    s.get("lr", t.lr);
    s.get("lr_floor", t.lr_floor);
    s.get("ema", t.ema);
    s.get("max_grad_norm", t.max_grad_norm);
    s.done();
    if (d.hidden < 1 || d.blocks < 0 || d.time_features < 2 || d.time_features % 2 != 0 ||
        d.class_features < 1)
      throw ValidationError("teacher", "invalid network shape");
    if (t.iters < 0 || t.batch < 1) throw ValidationError("teacher", "invalid training sizes");
  }
  {
    auto s = top.section("distill");
    auto& d = cfg.distill;
    s.get("iters", d.iters);
    s.get("batch", d.batch);
    s.get("lr", d.lr);
    s.get("lr_floor", d.lr_floor);
    s.get("skip", d.skip);
    s.get("target_ema", d.target_ema);
    s.get("sigma_data", d.sigma_data);
    s.get("max_grad_norm", d.max_grad_norm);
    s.get("t_power", d.sampling.t_power);
    s.get("substeps", d.sampling.substeps);
    s.done();
    if (d.iters < 0 || d.batch < 1) throw ValidationError("distill", "invalid training sizes");
    require_positive("distill.t_power", d.sampling.t_power);
    if (d.sampling.substeps < 0) throw ValidationError("distill.substeps", "must be >= 0");
    if (d.skip < 1 || d.skip > cfg.schedule.T)
      throw ValidationError("distill.skip", "must be in [1, T]");
    require_positive("distill.sigma_data", d.sigma_data);
  }
  {
    auto s = top.section("reward");
    auto& d = cfg.reward;
    s.get("kind", d.kind);
    s.get("offset", d.offset);
    s.get("levels", d.levels);
    s.get("scale", d.scale);
    s.get("classifier_path", d.classifier_path);
    s.get("classifier_samples", d.classifier_samples);
    s.get("classifier_iters", d.classifier_iters);
    s.get("classifier_lr", d.classifier_lr);
    s.done();
    check("reward.kind", [&] { rewards::parse_reward_kind(d.kind); });
    if (d.levels < 1) throw ValidationError("reward.levels", "must be >= 1");
    require_positive("reward.scale", d.scale);
  }
  {
    auto s = top.section("surrogate");
    auto& d = cfg.surrogate;
    s.get("head_hidden", d.head_hidden);
    s.get("scorer_t", d.scorer_t);
    s.get("trunk", d.trunk);
    s.get("pretrain_iters", d.pretrain_iters);
    s.get("heldout_groups", d.heldout_groups);
    s.done();
    if (d.trunk != "teacher" && d.trunk != "random")
      throw ValidationError("surrogate.trunk", "expected 'teacher' or 'random'");
    if (d.scorer_t < 0 || d.scorer_t > cfg.schedule.T)
      throw ValidationError("surrogate.scorer_t", "must be in [0, T]");
    if (d.head_hidden < 1) throw ValidationError("surrogate.head_hidden", "must be >= 1");
  }
  {
    auto s = top.section("train");
    auto& d = cfg.train;
    auto& t = d.cfg;
    const bool quantized = cfg.reward.kind == "quantized";
    if (quantized) {
      t.N1 = 10;
      t.N2 = 20;
    }
    s.get("Ns", t.Ns);
    s.get("N1", t.N1);
    s.get("N2", t.N2);
    s.get("c", t.c);
    s.get("c1", t.c1);
    s.get("c2", t.c2);
    s.get("eta", t.eta);
    s.get("eta1", t.eta1);
    s.get("eta2", t.eta2);
    s.get("mu", t.mu);
    s.get("window", t.window);
    s.get("stats_decay", t.stats_decay);
    s.get("stats_floor", t.stats_floor);
    s.get("stats_warmup", t.stats_warmup);
    s.get("tau_mid", t.tau_mid);
    s.get("skip", t.skip);
    s.get("distill_batch", t.distill_batch);
    s.get("distill_t_power", t.distill_sampling.t_power);
    s.get("distill_substeps", t.distill_sampling.substeps);
    s.get("pair_batch", t.pair_batch);
    s.get("buffer_capacity", t.buffer_capacity);
    s.get("max_grad_norm", t.max_grad_norm);
    s.get("rwr_temperature", t.rwr_temperature);
    s.get("direct_normalize", t.direct_normalize);
    s.get("degenerate_patience", t.degenerate_patience);
    s.get("steps", d.steps);
    s.get("eval_every", d.eval_every);
    s.get("snapshot_steps", d.snapshot_steps);
    s.get("eval_per_condition", d.eval_per_condition);
    s.done();
    check("train", [&] { t.validate(); });
    if (t.tau_mid < 0 || t.tau_mid >= cfg.schedule.T)
      throw ValidationError("train.tau_mid", "must be in [0, T)");
    if (d.steps < 0) throw ValidationError("train.steps", "must be >= 0");
    if (d.eval_per_condition < 1) throw ValidationError("train.eval_per_condition", "must be >= 1");
  }
  {
    auto s = top.section("analyze");
    auto& d = cfg.analyze;
    s.get("lipschitz_levels", d.lipschitz_levels);
    s.get("epsilon", d.epsilon);
    s.get("lipschitz_samples", d.lipschitz_samples);
    s.get("H_list", d.H_list);
    s.get("diversity_draws", d.diversity_draws);
    s.get("td_traces", d.td_traces);
    s.get("td_gamma", d.td_gamma);
    s.get("projections", d.projections);
    s.get("fidelity_samples", d.fidelity_samples);
    s.get("teacher_steps", d.teacher_steps);
    s.done();
    for (int t : d.lipschitz_levels)
      if (t < 1 || t > cfg.schedule.T)
        throw ValidationError("analyze.lipschitz_levels", "levels must be in [1, T]");
    if (!(d.epsilon > 0 && d.epsilon < 1))
      throw ValidationError("analyze.epsilon", "must be in (0, 1)");
    for (int h : d.H_list)
      if (h != 1 && h != 2 && h != 4 && h != 8)
        throw ValidationError("analyze.H_list", "entries must be 1, 2, 4 or 8");
    if (d.projections < 32) throw ValidationError("analyze.projections", "must be >= 32");
    if (d.teacher_steps < 1 || d.teacher_steps > cfg.schedule.T)
      throw ValidationError("analyze.teacher_steps", "must be in [1, T]");
  }
  {
    auto s = top.section("io");
    auto& d = cfg.io;
    s.get("run_dir", d.run_dir);
    s.get("run_id", d.run_id);
    s.get("wall_time", d.wall_time);
    s.done();
  }
  top.get("seeds", cfg.seeds);
  if (cfg.seeds.empty()) throw ValidationError("seeds", "must list at least one seed");
  top.done();
  return cfg;
}

json to_json(const RunConfig& cfg) {
  json j;
  j["schema_version"] = cfg.schema_version;
  const auto& ds = cfg.dataset;
  j["dataset"] = {{"kind", ds.kind},
                  {"dim", ds.dim},
                  {"classes", ds.classes},
                  {"radius", ds.radius},
                  {"spread", ds.spread}};
  const auto& sc = cfg.schedule;
  j["schedule"] = {
      {"T", sc.T}, {"kind", sc.kind}, {"beta_min", sc.beta_min}, {"beta_max", sc.beta_max}};
  const auto& te = cfg.teacher;
  j["teacher"] = {{"hidden", te.hidden},
                  {"blocks", te.blocks},
                  {"time_features", te.time_features},
                  {"class_features", te.class_features},
                  {"iters", te.training.iters},
                  {"batch", te.training.batch},
                  {"lr", te.training.lr},
                  {"lr_floor", te.training.lr_floor},
                  {"ema", te.training.ema},
                  {"max_grad_norm", te.training.max_grad_norm}};
  const auto& di = cfg.distill;
  j["distill"] = {{"iters", di.iters},
                  {"batch", di.batch},
                  {"lr", di.lr},
                  {"lr_floor", di.lr_floor},
                  {"skip", di.skip},
                  {"target_ema", di.target_ema},
                  {"sigma_data", di.sigma_data},
                  {"max_grad_norm", di.max_grad_norm},
                  {"t_power", di.sampling.t_power},
                  {"substeps", di.sampling.substeps}};
  const auto& rw = cfg.reward;
  j["reward"] = {{"kind", rw.kind},
                 {"offset", rw.offset},
                 {"levels", rw.levels},
                 {"scale", rw.scale},
                 {"classifier_path", rw.classifier_path},
                 {"classifier_samples", rw.classifier_samples},
                 {"classifier_iters", rw.classifier_iters},
                 {"classifier_lr", rw.classifier_lr}};
  const auto& su = cfg.surrogate;
  j["surrogate"] = {{"head_hidden", su.head_hidden},
                    {"scorer_t", su.scorer_t},
                    {"trunk", su.trunk},
                    {"pretrain_iters", su.pretrain_iters},
                    {"heldout_groups", su.heldout_groups}};
  const auto& t = cfg.train.cfg;
  j["train"] = {{"Ns", t.Ns},
                {"N1", t.N1},
                {"N2", t.N2},
                {"c", t.c},
                {"c1", t.c1},
                {"c2", t.c2},
                {"eta", t.eta},
                {"eta1", t.eta1},
                {"eta2", t.eta2},
                {"mu", t.mu},
                {"window", t.window},
                {"stats_decay", t.stats_decay},
                {"stats_floor", t.stats_floor},
                {"stats_warmup", t.stats_warmup},
                {"tau_mid", t.tau_mid},
                {"skip", t.skip},
                {"distill_batch", t.distill_batch},
                {"distill_t_power", t.distill_sampling.t_power},
                {"distill_substeps", t.distill_sampling.substeps},
                {"pair_batch", t.pair_batch},
                {"buffer_capacity", t.buffer_capacity},
                {"max_grad_norm", t.max_grad_norm},
                {"rwr_temperature", t.rwr_temperature},
                {"direct_normalize", t.direct_normalize},
                {"degenerate_patience", t.degenerate_patience},
                {"steps", cfg.train.steps},
                {"eval_every", cfg.train.eval_every},
                {"snapshot_steps", cfg.train.snapshot_steps},
                {"eval_per_condition", cfg.train.eval_per_condition}};
  const auto& an = cfg.analyze;
  j["analyze"] = {{"lipschitz_levels", an.lipschitz_levels},
                  {"epsilon", an.epsilon},
                  {"lipschitz_samples", an.lipschitz_samples},
                  {"H_list", an.H_list},
                  {"diversity_draws", an.diversity_draws},
                  {"td_traces", an.td_traces},
                  {"td_gamma", an.td_gamma},
                  {"projections", an.projections},
                  {"fidelity_samples", an.fidelity_samples},
                  {"teacher_steps", an.teacher_steps}};
  j["io"] = {
      {"run_dir", cfg.io.run_dir}, {"run_id", cfg.io.run_id}, {"wall_time", cfg.io.wall_time}};
  j["seeds"] = cfg.seeds;
  return j;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path);
}

// FNV-1a, stable across platforms.
std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

double seconds_now() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

std::ofstream open_csv(const std::string& path, const std::string& header) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << std::setprecision(17) << header << "\n";
  return out;
}

}  // namespace

nn::NetShape RunConfig::net_shape() const {
  nn::NetShape s;
  s.dim = dataset.dim;
  s.num_classes = dataset.classes;
  s.hidden = teacher.hidden;
  s.blocks = teacher.blocks;
  s.time_features = teacher.time_features;
  s.class_features = teacher.class_features;
  s.horizon = schedule.T;
  return s;
}

RunConfig parse_config_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError("<root>", std::string("malformed JSON: ") + e.what());
  }
  return from_json(j);
}

RunConfig parse_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw ValidationError("<file>", e.what());
  }
  return parse_config_text(text);
}

std::string emit_config(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

// ---- metrics ----

std::string to_jsonl(const MetricRecord& rec) {
  json j;
  j["run_id"] = rec.run_id;
  j["method"] = rec.method;
  j["stage"] = rec.stage;
  j["step"] = rec.step;
  j["name"] = rec.name;
  j["value"] = rec.value ? json(*rec.value) : json(nullptr);
  j["seed"] = rec.seed;
  j["wall_time"] = rec.wall_time ? json(*rec.wall_time) : json(nullptr);
  return j.dump();
}

MetricRecord parse_metric_line(const std::string& line) {
  const json j = json::parse(line);
  MetricRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.stage = j.at("stage").get<std::string>();
  r.step = j.at("step").get<long>();
  r.name = j.at("name").get<std::string>();
  if (!j.at("value").is_null()) r.value = j.at("value").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  if (!j.at("wall_time").is_null()) r.wall_time = j.at("wall_time").get<double>();
  return r;
}

std::vector<MetricRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(parse_metric_line(line));
  return out;
}

MetricsSink::MetricsSink(const std::string& path, std::string run_id, std::uint64_t seed,
                         bool wall_time)
    : path_(path),
      run_id_(std::move(run_id)),
      seed_(seed),
      wall_time_(wall_time),
      out_(path, std::ios::app),
      t0_(seconds_now()) {
  if (!out_) throw std::runtime_error("cannot open metrics sink " + path);
}

void MetricsSink::emit(MetricRecord rec) {
  if (rec.value && !std::isfinite(*rec.value)) {
    rec.value.reset();
    ++warnings_;
  }
  out_ << to_jsonl(rec) << '\n';
  if (!out_) throw std::runtime_error("metrics write failed: " + path_);
  ++count_;
}

void MetricsSink::emit(const std::string& stage, const std::string& method, long step,
                       const std::string& name, double value) {
  MetricRecord rec{run_id_, method, stage, step, name, value, seed_, std::nullopt};
  if (wall_time_) rec.wall_time = seconds_now() - t0_;
  emit(std::move(rec));
}

void MetricsSink::flush() {
  out_.flush();
  if (!out_) throw std::runtime_error("metrics flush failed: " + path_);
}

// ---- checkpoints ----

std::map<std::string, long> shape_map(const nn::NetShape& s) {
  return {{"dim", s.dim},
          {"num_classes", s.num_classes},
          {"hidden", s.hidden},
          {"blocks", s.blocks},
          {"time_features", s.time_features},
          {"class_features", s.class_features},
          {"horizon", s.horizon}};
}

bool checkpoint_exists(const std::string& stem) {
  return fs::exists(stem + ".json") && fs::exists(stem + ".bin");
}

void save_checkpoint(const std::string& stem, const Vector& params,
                     const CheckpointManifest& manifest) {
  if (manifest.param_count != params.size())
    throw CheckpointError("manifest param_count " + std::to_string(manifest.param_count) +
                          " does not match payload " + std::to_string(params.size()));
  const fs::path p(stem);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  {
    std::ofstream out(stem + ".bin", std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(params.data()),
              static_cast<std::streamsize>(params.size() * sizeof(double)));
    if (!out) throw CheckpointError("cannot write " + stem + ".bin");
  }
  json j;
  j["schema_version"] = manifest.schema_version;
  j["module"] = manifest.module;
  j["step"] = manifest.step;
  j["ema"] = manifest.ema;
  j["param_count"] = manifest.param_count;
  j["shape"] = json::object();
  for (const auto& [k, v] : manifest.shape) j["shape"][k] = v;
  write_file(stem + ".json", j.dump(2) + "\n");
}

LoadedCheckpoint load_checkpoint(const std::string& stem, const std::string& module,
                                 long expected_count) {
  if (!checkpoint_exists(stem)) throw CheckpointError("checkpoint not found: " + stem);
  LoadedCheckpoint lc;
  try {
    const json j = json::parse(read_file(stem + ".json"));
    auto& m = lc.manifest;
    m.schema_version = j.at("schema_version").get<int>();
    m.module = j.at("module").get<std::string>();
    m.step = j.at("step").get<long>();
    m.ema = j.at("ema").get<bool>();
    m.param_count = j.at("param_count").get<long>();
    for (auto it = j.at("shape").begin(); it != j.at("shape").end(); ++it)
      m.shape[it.key()] = it.value().get<long>();
  } catch (const json::exception& e) {
    throw CheckpointError("malformed manifest " + stem + ".json: " + e.what());
  }
  const auto& m = lc.manifest;
  if (m.schema_version != kSchemaVersion)
    throw CheckpointError(stem + ": schema_version expected " + std::to_string(kSchemaVersion) +
                          ", found " + std::to_string(m.schema_version));
  if (m.module != module)
    throw CheckpointError(stem + ": module expected '" + module + "', found '" + m.module + "'");
  if (expected_count >= 0 && m.param_count != expected_count)
    throw CheckpointError(stem + ": param_count expected " + std::to_string(expected_count) +
                          ", found " + std::to_string(m.param_count));
  const auto bytes = fs::file_size(stem + ".bin");
  const auto want = static_cast<std::uintmax_t>(m.param_count) * sizeof(double);
  if (bytes != want)
    throw CheckpointError(stem + ".bin: payload length expected " + std::to_string(want) +
                          " bytes, found " + std::to_string(bytes));
  lc.params.resize(m.param_count);
  std::ifstream in(stem + ".bin", std::ios::binary);
  in.read(reinterpret_cast<char*>(lc.params.data()), static_cast<std::streamsize>(want));
  if (!in) throw CheckpointError("cannot read " + stem + ".bin");
  return lc;
}

Matrix reward_targets(const diffusion::ToyDataset& data, double offset) {
  Matrix t(data.dim(), data.num_classes());
  const double push = offset * data.params().spread;
  for (int c = 0; c < data.num_classes(); ++c) {
    const Vector m = data.component_mean(c);
    const double n = m.norm();
    t.col(c) = n > 0 ? Vector(m * (1.0 + push / n)) : m;
  }
  return t;
}

// ---- pipeline ----

namespace {

diffusion::ToyDataset build_dataset(const RunConfig& cfg, std::uint64_t seed) {
  return diffusion::make_toy_dataset(cfg.dataset.kind, cfg.dataset.dim, cfg.dataset.classes, seed,
                                     {cfg.dataset.radius, cfg.dataset.spread});
}

diffusion::NoiseSchedule build_schedule(const RunConfig& cfg) {
  return diffusion::make_schedule(cfg.schedule.T, diffusion::parse_schedule_kind(cfg.schedule.kind),
                                  cfg.schedule.beta_min, cfg.schedule.beta_max);
}

std::string derive_run_id(const RunConfig& cfg, std::uint64_t seed) {
  if (!cfg.io.run_id.empty()) return cfg.io.run_id;
  RunConfig c = cfg;
  c.io = {};
  c.seeds = {seed};
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << fnv1a(emit_config(c));
  return ss.str() + "-s" + std::to_string(seed);
}

}  // namespace

Pipeline::Pipeline(RunConfig cfg, std::string run_dir, std::uint64_t seed)
    : cfg_(std::move(cfg)),
      dir_(std::move(run_dir)),
      seed_(seed),
      data_(build_dataset(cfg_, seed)),
      sched_(build_schedule(cfg_)) {
  fs::create_directories(fs::path(dir_) / "checkpoints");
  fs::create_directories(fs::path(dir_) / "reports");
  RunConfig effective = cfg_;
  effective.io.run_dir = dir_;
  effective.seeds = {seed_};
  write_file((fs::path(dir_) / "effective_config.json").string(), emit_config(effective));
  json prov;
  prov["revision"] = LASRO_GIT_REVISION;
  prov["timestamp"] = utc_timestamp();
  prov["seed"] = seed_;
  prov["schema_version"] = kSchemaVersion;
  write_file((fs::path(dir_) / "provenance.json").string(), prov.dump(2) + "\n");
  sink_ = std::make_unique<MetricsSink>((fs::path(dir_) / "metrics.jsonl").string(),
                                        derive_run_id(cfg_, seed_), seed_, cfg_.io.wall_time);
}

std::vector<int> Pipeline::conditions() const {
  std::vector<int> c(static_cast<std::size_t>(cfg_.dataset.classes));
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = static_cast<int>(i);
  return c;
}

std::string Pipeline::checkpoint_stem(const std::string& name) const {
  return (fs::path(dir_) / "checkpoints" / name).string();
}

std::string Pipeline::report_path(const std::string& probe) const {
  return (fs::path(dir_) / "reports" / (probe + "_report.csv")).string();
}

void Pipeline::require(const std::string& name) const {
  if (!checkpoint_exists(checkpoint_stem(name)))
    throw PreconditionError("missing prerequisite checkpoint '" + name + "' in " +
                            (fs::path(dir_) / "checkpoints").string());
}

void Pipeline::stage_done(const std::string&) { sink_->flush(); }

nn::DenoiserNet Pipeline::load_teacher() const {
  require("teacher");
  nn::DenoiserNet net(cfg_.net_shape());
  net.params() = load_checkpoint(checkpoint_stem("teacher"), "teacher", net.param_count()).params;
  return net;
}

consistency::ConsistencyModel Pipeline::load_student() const {
  require("student");
  consistency::ConsistencyModel f(cfg_.net_shape(), sched_, cfg_.distill.sigma_data);
  f.params() = load_checkpoint(checkpoint_stem("student"), "student", f.param_count()).params;
  return f;
}

rewards::SurrogateReward Pipeline::load_surrogate(const std::string& name) const {
  require(name);
  nn::DenoiserNet trunk(cfg_.net_shape());
  Rng rng(0);
  rewards::SurrogateReward R(trunk, cfg_.surrogate.head_hidden, rng, cfg_.surrogate.scorer_t);
  R.set_params(load_checkpoint(checkpoint_stem(name), "surrogate", R.param_count()).params);
  return R;
}

std::unique_ptr<rewards::RewardSignal> Pipeline::make_reward() const {
  rewards::RewardParams p;
  p.targets = reward_targets(data_, cfg_.reward.offset);
  p.levels = cfg_.reward.levels;
  p.scale = cfg_.reward.scale;
  if (rewards::parse_reward_kind(cfg_.reward.kind) == rewards::RewardKind::kClassifier) {
    std::string stem = cfg_.reward.classifier_path;
    if (stem.empty()) {
      require("classifier");
      stem = checkpoint_stem("classifier");
    }
    if (!checkpoint_exists(stem))
      throw PreconditionError("missing classifier checkpoint '" + stem + "'");
    rewards::ToyClassifier clf(data_.dim(), data_.num_classes());
    clf.params() = load_checkpoint(stem, "classifier", clf.params().size()).params;
    p.classifier = clf;
  }
  return rewards::make_reward(cfg_.reward.kind, p);
}

analysis::EvalSet Pipeline::eval_set() const {
  return analysis::make_eval_set(data_, conditions(), cfg_.train.eval_per_condition,
                                 mix_seed(seed_, 6));
}

void Pipeline::train_teacher() {
  const auto shape = cfg_.net_shape();
  const auto& opts = cfg_.teacher.training;
  const auto teacher = diffusion::train_teacher(
      data_, sched_, shape, opts, mix_seed(seed_, 1), [&](int it, double loss) {
        if ((it + 1) % 50 == 0) sink_->emit("train-teacher", "", it + 1, "loss", loss);
      });
  save_checkpoint(
      checkpoint_stem("teacher"), teacher.params(),
      {kSchemaVersion, "teacher", opts.iters, true, teacher.param_count(), shape_map(shape)});

  Rng rng(mix_seed(seed_, 7));
  const int n = cfg_.analyze.fidelity_samples;
  std::vector<int> labels;
  const Matrix ref = data_.sample_labeled(rng, n, labels);
  const Matrix xs = diffusion::ddpm_sample(teacher, labels, sched_, cfg_.analyze.teacher_steps,
                                           mix_seed(seed_, 8));
  sink_->emit("train-teacher", "", opts.iters, "fidelity",
              analysis::fidelity_proxy(xs, ref, cfg_.analyze.projections, mix_seed(seed_, 9)));
  stage_done("train-teacher");
}

void Pipeline::distill() {
  const auto teacher = load_teacher();
  const auto& opts = cfg_.distill;
  const auto f = consistency::distill(teacher, data_, sched_, opts, mix_seed(seed_, 2),
                                      [&](int it, double loss) {
                                        if ((it + 1) % 50 == 0)
                                          sink_->emit("distill", "", it + 1, "loss", loss);
                                      });
  save_checkpoint(
      checkpoint_stem("student"), f.params(),
      {kSchemaVersion, "student", opts.iters, true, f.param_count(), shape_map(cfg_.net_shape())});
  const auto eval = eval_set();
  for (int H : {1, 2}) {
    Rng rng(mix_seed(seed_, 10));
    const auto s = consistency::cm_sample_from(f, eval.x_T, eval.c, H, rng);
    sink_->emit("distill", "", opts.iters, "fidelity_" + std::to_string(H) + "step",
                analysis::fidelity_proxy(s.outputs.back(), eval.reference, cfg_.analyze.projections,
                                         mix_seed(seed_, 9)));
  }
  stage_done("distill");
}

void Pipeline::pretrain_reward() {
  const auto teacher = load_teacher();
  const auto f = load_student();
  const auto conds = conditions();
  if (rewards::parse_reward_kind(cfg_.reward.kind) == rewards::RewardKind::kClassifier &&
      cfg_.reward.classifier_path.empty()) {
    rewards::ToyClassifier clf(data_.dim(), data_.num_classes());
    Rng rng(mix_seed(seed_, 11));
    std::vector<int> labels;
    const Matrix x = data_.sample_labeled(rng, cfg_.reward.classifier_samples, labels);
    clf.fit(x, labels, cfg_.reward.classifier_iters, cfg_.reward.classifier_lr);
    sink_->emit("pretrain-reward", "", 0, "classifier_accuracy", clf.accuracy(x, labels));
    save_checkpoint(checkpoint_stem("classifier"), clf.params(),
                    {kSchemaVersion,
                     "classifier",
                     cfg_.reward.classifier_iters,
                     false,
                     static_cast<long>(clf.params().size()),
                     {{"dim", data_.dim()}, {"num_classes", data_.num_classes()}}});
  }
  const auto r = make_reward();

  Rng init(mix_seed(seed_, 3));
  nn::DenoiserNet trunk = teacher;
  if (cfg_.surrogate.trunk == "random") trunk.init(init);
  rewards::SurrogateReward R(trunk, cfg_.surrogate.head_hidden, init, cfg_.surrogate.scorer_t);
  const auto& tc = cfg_.train.cfg;
  const auto res = train::pretrain_surrogate(tc, f, R, *r, conds, cfg_.surrogate.pretrain_iters,
                                             mix_seed(seed_, 4));
  for (std::size_t i = 0; i < res.losses.size(); ++i)
    if ((i + 1) % 10 == 0)
      sink_->emit("pretrain-reward", "", static_cast<long>(i + 1), "pair_loss", res.losses[i]);
  sink_->emit("pretrain-reward", "", cfg_.surrogate.pretrain_iters, "pairs",
              static_cast<double>(res.pairs));
  sink_->emit("pretrain-reward", "", cfg_.surrogate.pretrain_iters, "skipped",
              static_cast<double>(res.skipped));
  Rng held(mix_seed(seed_, 12));
  const auto pairs = train::mine_pairs(tc, f, *r, conds, cfg_.surrogate.heldout_groups, held);
  if (!pairs.empty())
    sink_->emit("pretrain-reward", "", cfg_.surrogate.pretrain_iters, "heldout_accuracy",
                rewards::pair_accuracy(R, pairs));
  auto shape = shape_map(cfg_.net_shape());
  shape["head_hidden"] = cfg_.surrogate.head_hidden;
  shape["scorer_t"] = cfg_.surrogate.scorer_t;
  save_checkpoint(
      checkpoint_stem("surrogate"), R.get_params(),
      {kSchemaVersion, "surrogate", cfg_.surrogate.pretrain_iters, false, R.param_count(), shape});
  stage_done("pretrain-reward");
}

runner::FinetuneResult Pipeline::finetune(runner::Method method) {
  const std::string name = runner::to_string(method);
  const auto teacher = load_teacher();
  auto f = load_student();
  std::optional<rewards::SurrogateReward> R;
  if (runner::needs_surrogate(method)) R = load_surrogate();
  const auto r = make_reward();

  train::FinetuneContext ctx{&teacher, &data_, r.get(), conditions(), cfg_.train.cfg};
  const auto eval = eval_set();
  runner::RunOptions opts;
  opts.steps = cfg_.train.steps;
  opts.eval_every = cfg_.train.eval_every;
  opts.snapshot_steps = cfg_.train.snapshot_steps;
  opts.eval = &eval;
  opts.eval_projections = cfg_.analyze.projections;
  const bool surrogate = runner::needs_surrogate(method);
  opts.on_step = [&](long step, const train::StepInfo& info) {
    sink_->emit("finetune", name, step, "loss", info.loss);
    sink_->emit("finetune", name, step, "reward_1step", info.reward_1step);
    sink_->emit("finetune", name, step, "reward_2step", info.reward_2step);
    if (surrogate) {
      sink_->emit("finetune", name, step, "lcm", info.terms.lcm);
      sink_->emit("finetune", name, step, "s1", info.terms.s1);
      sink_->emit("finetune", name, step, "s2", info.terms.s2);
    }
  };
  opts.on_eval = [&](long step, const analysis::EvalResult& e) {
    sink_->emit("finetune", name, step, "eval_reward_1step", e.reward_1step);
    sink_->emit("finetune", name, step, "eval_reward_2step", e.reward_2step);
    sink_->emit("finetune", name, step, "eval_fidelity", e.fidelity);
  };
  opts.on_adapt = [&](long step, bool ran, double loss) {
    if (ran)
      sink_->emit("finetune", name, step, "psi_loss", loss);
    else
      sink_->emit("finetune", name, step, "adapt_skipped", 1.0);
  };

  auto res =
      runner::run_finetune(method, ctx, std::move(f), std::move(R), mix_seed(seed_, 5), opts);

  const auto& cn = res.counters;
  const long steps = cfg_.train.steps;
  for (const auto& [key, v] :
       std::vector<std::pair<std::string, long>>{{"trajectories", cn.trajectories},
                                                 {"reward_evals", cn.reward_evals},
                                                 {"theta_updates", cn.theta_updates},
                                                 {"psi_updates", cn.psi_updates},
                                                 {"skipped_adaptations", cn.skipped_adaptations},
                                                 {"pairs_minted", cn.pairs_minted},
                                                 {"warmup_trajectories", cn.warmup_trajectories}})
    sink_->emit("finetune", name, steps, "count_" + key, static_cast<double>(v));

  const auto shape = shape_map(cfg_.net_shape());
  const long count = res.f.param_count();
  save_checkpoint(checkpoint_stem("finetune_" + name), res.f.params(),
                  {kSchemaVersion, "student", steps, false, count, shape});
  save_checkpoint(checkpoint_stem("finetune_" + name + "_ema"), res.ema,
                  {kSchemaVersion, "student", steps, true, count, shape});
  for (const auto& [step, p] : res.snapshots)
    save_checkpoint(checkpoint_stem("finetune_" + name + "_ema_" + std::to_string(step)), p,
                    {kSchemaVersion, "student", step, true, count, shape});
  if (res.R) {
    auto sshape = shape;
    sshape["head_hidden"] = cfg_.surrogate.head_hidden;
    sshape["scorer_t"] = cfg_.surrogate.scorer_t;
    save_checkpoint(checkpoint_stem("surrogate_" + name), res.R->get_params(),
                    {kSchemaVersion, "surrogate", steps, false, res.R->param_count(), sshape});
  }
  stage_done("finetune");
  return res;
}

void Pipeline::analyze(const std::string& probe, const std::string& method) {
  const auto& an = cfg_.analyze;
  const auto conds = conditions();
  const int mid = cfg_.train.cfg.mid(sched_.T);
  if (probe == "td") {
    const auto f = load_student();
    const auto R = load_surrogate();
    const auto r = make_reward();
    Rng rng(mix_seed(seed_, 20));
    std::vector<consistency::TwoStepTrace> traces;
    for (int i = 0; i < an.td_traces; ++i) {
      const int c =
          conds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(conds.size()) - 1))];
      traces.push_back(consistency::sample_two_step(f, std::span<const int>(&c, 1), mid, rng));
    }
    const analysis::ScoreFn Rf = [&](const Vector& z, int c) { return R.score(z, c); };
    const analysis::ScoreFn rf = [&](const Vector& z, int c) { return r->evaluate(z, c); };
    auto out = open_csv(report_path("td"), "gamma,l_td,l_two_term,max_abs_diff");
    std::vector<double> gammas{an.td_gamma};
    if (an.td_gamma != 0.9) gammas.push_back(0.9);
    for (double g : gammas) {
      const auto chk = analysis::td_equivalence_check(Rf, rf, traces, g);
      out << g << "," << chk.l_td << "," << chk.l_two_term << "," << chk.max_abs_diff << "\n";
      if (g == an.td_gamma) sink_->emit("analyze", "", 0, "td_max_abs_diff", chk.max_abs_diff);
    }
  } else if (probe == "lipschitz") {
    const auto f = load_student();
    const auto levels = an.lipschitz_levels.empty() ? analysis::default_lipschitz_levels(sched_.T)
                                                    : an.lipschitz_levels;
    std::vector<std::pair<std::string, analysis::QualityFn>> qualities;
    if (data_.has_log_density())
      qualities.emplace_back("density", analysis::density_quality(data_));
    const auto r = make_reward();
    qualities.emplace_back("reward", analysis::reward_quality(*r));
    auto out = open_csv(report_path("lipschitz"), "quality,t,estimate,skipped,spearman");
    for (const auto& [qname, q] : qualities) {
      const auto rep = analysis::local_lipschitz(f, q, levels, an.epsilon, an.lipschitz_samples,
                                                 conds, mix_seed(seed_, 21));
      std::vector<double> ts(rep.t_levels.begin(), rep.t_levels.end());
      const double rho = analysis::spearman(ts, rep.estimates);
      for (std::size_t i = 0; i < ts.size(); ++i)
        out << qname << "," << rep.t_levels[i] << "," << rep.estimates[i] << "," << rep.skipped[i]
            << "," << rho << "\n";
      sink_->emit("analyze", "", 0, "lipschitz_spearman_" + qname, rho);
    }
  } else if (probe == "diversity") {
    const auto f = load_student();
    const auto rows =
        analysis::diversity_probe(f, conds, an.H_list, an.diversity_draws, mix_seed(seed_, 22));
    auto out = open_csv(report_path("diversity"), "H,variance,std_error");
    for (const auto& row : rows) {
      out << row.H << "," << row.variance << "," << row.std_error << "\n";
      sink_->emit("analyze", "", row.H, "diversity_variance", row.variance);
    }
  } else if (probe == "fidelity") {
    const auto teacher = load_teacher();
    const auto f = load_student();
    Rng rng(mix_seed(seed_, 23));
    std::vector<int> labels;
    const Matrix ref = data_.sample_labeled(rng, an.fidelity_samples, labels);
    const Matrix held = data_.sample(rng, labels, static_cast<Eigen::Index>(labels.size()));
    std::vector<std::tuple<std::string, int, Matrix>> sets;
    sets.emplace_back("data", 0, held);
    sets.emplace_back(
        "teacher", an.teacher_steps,
        diffusion::ddpm_sample(teacher, labels, sched_, an.teacher_steps, mix_seed(seed_, 24)));
    for (int H : {1, 2})
      sets.emplace_back("student", H,
                        consistency::cm_sample(f, labels, H, mix_seed(seed_, 25)).outputs.back());
    auto out = open_csv(report_path("fidelity"), "sampler,steps,fidelity");
    for (const auto& [who, steps, x] : sets) {
      const double w = analysis::fidelity_proxy(x, ref, an.projections, mix_seed(seed_, 26));
      out << who << "," << steps << "," << w << "\n";
      sink_->emit("analyze", "", steps, "fidelity_" + who, w);
    }
  } else if (probe == "tradeoff") {
    const auto base = load_student();
    const auto r = make_reward();
    const auto eval = eval_set();
    std::vector<analysis::TradeoffInput> inputs;
    for (long step : cfg_.train.snapshot_steps) {
      const std::string stem =
          checkpoint_stem("finetune_" + method + "_ema_" + std::to_string(step));
      inputs.push_back({step, [stem, base] {
                          auto g = base;
                          g.params() = load_checkpoint(stem, "student", g.param_count()).params;
                          return g;
                        }});
    }
    if (inputs.size() < 2)
      throw PreconditionError("tradeoff report needs at least two snapshot steps");
    const auto rows = analysis::tradeoff_report(inputs, *r, eval, mid, mix_seed(seed_, 27));
    analysis::write_tradeoff_csv(rows, report_path("tradeoff"));
    for (const auto& row : rows)
      if (row.error.empty()) {
        sink_->emit("analyze", method, row.step, "tradeoff_reward_2step", row.reward_2step);
        sink_->emit("analyze", method, row.step, "tradeoff_fidelity", row.fidelity);
      }
  } else {
    throw std::invalid_argument("unknown probe '" + probe + "'");
  }
  stage_done("analyze");
}

void Pipeline::report() {
  sink_->flush();
  const auto records = read_metrics(sink_->path());
  // Final and initial evaluation per method, keyed by the latest entries in the stream.
  struct Row {
    std::map<long, std::map<std::string, std::optional<double>>> by_step;
  };
  std::map<std::string, Row> rows;
  for (const auto& rec : records)
    if (rec.stage == "finetune" && rec.name.rfind("eval_", 0) == 0)
      rows[rec.method].by_step[rec.step][rec.name.substr(5)] = rec.value;
  if (rows.empty())
    throw PreconditionError("no finetune evaluations in " + sink_->path() + "; run finetune first");
  auto out = open_csv(report_path("summary"), "method,step,reward_1step,reward_2step,fidelity");
  auto cell = [](const std::map<std::string, std::optional<double>>& m, const std::string& k) {
    auto it = m.find(k);
    std::ostringstream ss;
    ss << std::setprecision(17);
    if (it != m.end() && it->second) ss << *it->second;
    return ss.str();
  };
  for (const auto& [method, row] : rows) {
    for (auto it : {row.by_step.begin(), std::prev(row.by_step.end())}) {
      out << method << "," << it->first << "," << cell(it->second, "reward_1step") << ","
          << cell(it->second, "reward_2step") << "," << cell(it->second, "fidelity") << "\n";
      if (row.by_step.size() == 1) break;
    }
  }
  stage_done("report");
}

void Pipeline::run(const std::string& subcommand, const std::string& method,
                   const std::string& probe) {
  if (subcommand == "train-teacher") {
    train_teacher();
  } else if (subcommand == "distill") {
    distill();
  } else if (subcommand == "pretrain-reward") {
    pretrain_reward();
  } else if (subcommand == "finetune") {
    finetune(runner::parse_method(method));
  } else if (subcommand == "analyze") {
    analyze(probe, method);
  } else if (subcommand == "report") {
    report();
  } else {
    throw std::invalid_argument("unknown subcommand '" + subcommand + "'");
  }
}

}  // namespace lasro::harness
