#include "fpg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fpg {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order, which must be little-endian");

namespace {

// Ordered list of named float64 sections making up the blob.
class BlobWriter {
 public:
  void add(const std::string& name, std::span<const double> values,
           std::vector<int> shape = {}) {
    if (shape.empty()) shape = {static_cast<int>(values.size())};
    sections_.push_back({{"name", name}, {"shape", shape},
                         {"offset", data_.size()}, {"count", values.size()}});
    data_.insert(data_.end(), values.begin(), values.end());
  }
  const json& sections() const { return sections_; }
  const std::vector<double>& data() const { return data_; }

 private:
  json sections_ = json::array();
  std::vector<double> data_;
};

class BlobReader {
 public:
  BlobReader(const json& sections, std::vector<double> data)
      : sections_(sections), data_(std::move(data)) {}

  std::vector<double> take(const std::string& name, std::size_t count) {
    if (next_ >= sections_.size())
      throw DataError("checkpoint: missing section '" + name + "'");
    const json& s = sections_[next_++];
    const std::string got = s.at("name").get<std::string>();
    if (got != name)
      throw DataError("checkpoint: expected section '" + name + "', found '" + got + "'");
    const std::size_t off = s.at("offset").get<std::size_t>();
    const std::size_t n = s.at("count").get<std::size_t>();
    if (n != count)
      throw DataError("checkpoint: section '" + name + "' holds " + std::to_string(n) +
                      " values, expected " + std::to_string(count));
    if (off > data_.size() || n > data_.size() - off)
      throw DataError("checkpoint: section '" + name + "' lies outside the blob");
    return {data_.begin() + off, data_.begin() + off + n};
  }

  // Size of the next section if it has the given name, else nullopt.
  std::optional<std::size_t> peek(const std::string& name) const {
    if (next_ >= sections_.size()) return std::nullopt;
    const json& s = sections_[next_];
    if (s.at("name").get<std::string>() != name) return std::nullopt;
    return s.at("count").get<std::size_t>();
  }

  void finish() const {
    if (next_ != sections_.size())
      throw DataError("checkpoint: unexpected extra sections");
  }

 private:
  const json& sections_;
  std::vector<double> data_;
  std::size_t next_ = 0;
};

void write_moments(BlobWriter& w, const std::string& prefix, const AdamW& opt) {
  for (std::size_t k = 0; k < opt.slots(); ++k) {
    if (opt.first_moments()[k].empty()) continue;
    w.add(prefix + ".m." + std::to_string(k), opt.first_moments()[k]);
    w.add(prefix + ".v." + std::to_string(k), opt.second_moments()[k]);
  }
}

void read_moments(BlobReader& r, const std::string& prefix, AdamW& opt,
                  std::size_t slots) {
  auto& m = opt.first_moments();
  auto& v = opt.second_moments();
  m.assign(slots, {});
  v.assign(slots, {});
  for (std::size_t k = 0; k < slots; ++k) {
    const std::string mk = prefix + ".m." + std::to_string(k);
    const auto n = r.peek(mk);
    if (!n) continue;
    m[k] = r.take(mk, *n);
    v[k] = r.take(prefix + ".v." + std::to_string(k), *n);
  }
}

json record_json(const EpochRecord& e) { return json::parse(history_line(e)); }

EpochRecord record_from(const json& j) {
  EpochRecord e;
  e.epoch = j.at("epoch").get<int>();
  e.step = j.at("step").get<long>();
  e.expected_flops = j.at("expected_flops").get<double>();
  e.budget = j.at("budget").get<double>();
  e.active_gates = j.at("active_gates").get<std::vector<int>>();
  e.train_loss = j.at("train_loss").get<double>();
  e.val_loss = j.at("val_loss").get<double>();
  e.penalty = j.at("penalty").get<double>();
  e.epsilon = j.at("epsilon").get<double>();
  e.tau = j.at("tau").get<double>();
  e.lambda = j.at("lambda").get<double>();
  e.alpha_lr = j.at("alpha_lr").get<double>();
  return e;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read '" + p.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_manifest(const std::string& dir) {
  const std::string text = read_text(fs::path(dir) / kManifestName);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError("checkpoint manifest parse error at byte " + std::to_string(e.byte));
  }
  if (!j.is_object() || j.value("version", -1) != kCheckpointVersion)
    throw DataError("checkpoint manifest: missing or unsupported version");
  return j;
}

SearchConfig config_from(const json& m) {
  try {
    return parse_config(m.at("config").dump());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint manifest /config: ") + e.what());
  }
}

std::vector<double> read_blob(const std::string& dir, std::size_t expected) {
  const std::string bytes = read_text(fs::path(dir) / kBlobName);
  if (bytes.size() != expected * sizeof(double))
    throw DataError("checkpoint blob has " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(expected * sizeof(double)));
  std::vector<double> out(expected);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

void write_file(const fs::path& p, const char* data, std::size_t n) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
    out.write(data, static_cast<std::streamsize>(n));
    if (!out) throw DataError("short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, p);
}

template <typename F>
auto guarded(F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint manifest: ") + e.what());
  }
}

}  // namespace

void save_checkpoint(const Searcher& s, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create checkpoint directory '" + dir + "'");

  BlobWriter blob;
  const ParamStore& ps = s.network().params;
  for (const Param& p : ps.params())
    blob.add("param." + p.name, *p.value, {p.shape.n, p.shape.c, p.shape.h, p.shape.w});
  const GateParams& g = s.gates();
  for (std::size_t l = 0; l < g.alpha.size(); ++l)
    blob.add("alpha." + std::to_string(l), g.alpha[l]);
  blob.add("fusion_logits", g.fusion_logits);
  write_moments(blob, "adam.weights", s.weight_optimizer());
  write_moments(blob, "adam.alpha", s.alpha_optimizer());

  json m;
  m["version"] = kCheckpointVersion;
  m["config"] = json::parse(dump_config(s.config()));
  m["step"] = s.step();
  m["total_steps"] = s.total_steps();
  m["rng"] = {{"seed", s.config().seed}, {"counter", s.step()}};
  const Schedules& sc = s.schedules();
  m["schedules"] = {{"epsilon", epsilon_schedule(sc, s.step())},
                    {"tau", tau_schedule(sc, s.step())},
                    {"lambda", lambda_schedule(sc, s.step())},
                    {"gamma", dnal_gamma_schedule(sc, s.step())}};
  m["budget"] = {{"flops", s.budget().flops}, {"unit", s.budget().unit}};
  m["optimizers"] = {
      {"weights", {{"steps", s.weight_optimizer().steps()},
                   {"slots", s.weight_optimizer().slots()}}},
      {"alpha", {{"steps", s.alpha_optimizer().steps()},
                 {"slots", s.alpha_optimizer().slots()}}}};
  const auto& acc = s.accumulator();
  m["accumulator"] = {{"train", acc.train}, {"val", acc.val},
                      {"penalty", acc.penalty}, {"count", acc.count}};
  json hist = json::array();
  for (const auto& e : s.history()) hist.push_back(record_json(e));
  m["history"] = hist;
  m["blob"] = {{"file", kBlobName}, {"dtype", "float64-le"},
               {"values", blob.data().size()}, {"sections", blob.sections()}};

  const auto& d = blob.data();
  write_file(fs::path(dir) / kBlobName, reinterpret_cast<const char*>(d.data()),
             d.size() * sizeof(double));
  const std::string text = m.dump(1);
  write_file(fs::path(dir) / kManifestName, text.data(), text.size());
}

SearchConfig checkpoint_config(const std::string& dir) {
  return config_from(read_manifest(dir));
}

void load_checkpoint(Searcher& s, const std::string& dir) {
  const json m = read_manifest(dir);
  guarded([&] {
    const auto& bj = m.at("blob");
    BlobReader r(bj.at("sections"),
                 read_blob(dir, bj.at("values").get<std::size_t>()));
    ParamStore& ps = s.network().params;
    for (ParamId id = 0; id < ps.size(); ++id)
      ps.set(id, r.take("param." + ps[id].name, ps[id].shape.numel()));
    GateParams& g = s.gates();
    for (std::size_t l = 0; l < g.alpha.size(); ++l)
      g.alpha[l] = r.take("alpha." + std::to_string(l), g.alpha[l].size());
    g.fusion_logits = r.take("fusion_logits", g.fusion_logits.size());
    const auto& opt = m.at("optimizers");
    read_moments(r, "adam.weights", s.weight_optimizer(),
                 opt.at("weights").at("slots").get<std::size_t>());
    read_moments(r, "adam.alpha", s.alpha_optimizer(),
                 opt.at("alpha").at("slots").get<std::size_t>());
    r.finish();
    s.weight_optimizer().set_steps(opt.at("weights").at("steps").get<long>());
    s.alpha_optimizer().set_steps(opt.at("alpha").at("steps").get<long>());

    Searcher::EpochAccumulator acc;
    const auto& a = m.at("accumulator");
    acc.train = a.at("train").get<double>();
    acc.val = a.at("val").get<double>();
    acc.penalty = a.at("penalty").get<double>();
    acc.count = a.at("count").get<long>();
    std::vector<EpochRecord> hist;
    for (const auto& e : m.at("history")) hist.push_back(record_from(e));
    s.restore(m.at("step").get<long>(), std::move(hist), acc);
    return 0;
  });
}

Searcher resume_search(const std::string& dir) {
  Searcher s(checkpoint_config(dir));
  load_checkpoint(s, dir);
  return s;
}

CheckpointGates load_checkpoint_gates(const std::string& dir) {
  const json m = read_manifest(dir);
  return guarded([&] {
    CheckpointGates out;
    out.config = config_from(m);
    const auto& bj = m.at("blob");
    const auto data = read_blob(dir, bj.at("values").get<std::size_t>());
    const json& secs = bj.at("sections");
    for (const auto& sec : secs) {
      const std::string name = sec.at("name").get<std::string>();
      const std::size_t off = sec.at("offset").get<std::size_t>();
      const std::size_t n = sec.at("count").get<std::size_t>();
      if (off > data.size() || n > data.size() - off)
        throw DataError("checkpoint: section '" + name + "' lies outside the blob");
      std::vector<double> v(data.begin() + off, data.begin() + off + n);
      if (name.rfind("alpha.", 0) == 0)
        out.gates.alpha.push_back(std::move(v));
      else if (name == "fusion_logits")
        out.gates.fusion_logits = std::move(v);
    }
    if (out.gates.alpha.empty() ||
        static_cast<int>(out.gates.fusion_logits.size()) != kFusionVariants)
      throw DataError("checkpoint: gate sections missing");
    for (const auto& row : out.gates.alpha)
      if (static_cast<int>(row.size()) != kCandidates)
        throw DataError("checkpoint: alpha row has the wrong length");
    out.gates.step = m.at("step").get<long>();
    out.gates.epsilon = m.at("schedules").at("epsilon").get<double>();
    out.gamma = m.at("schedules").at("gamma").get<double>();
    out.tau = m.at("schedules").at("tau").get<double>();
    return out;
  });
}

}  // namespace fpg
