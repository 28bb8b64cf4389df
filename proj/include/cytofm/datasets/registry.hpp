#pragma once

#include "cytofm/core/blob_io.hpp"
#include "cytofm/core/error.hpp"
#include "cytofm/preprocess/image.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace cytofm {

enum class Organ { breast, cervix, thyroid, other };
enum class LabelKind { binary, multiclass, segmentation, none };
enum class DatasetRole { pretrain, evaluate };

NLOHMANN_JSON_SERIALIZE_ENUM(Organ, {{Organ::breast, "breast"},
                                     {Organ::cervix, "cervix"},
                                     {Organ::thyroid, "thyroid"},
                                     {Organ::other, "other"}})
NLOHMANN_JSON_SERIALIZE_ENUM(LabelKind, {{LabelKind::binary, "binary"},
                                         {LabelKind::multiclass, "multiclass"},
                                         {LabelKind::segmentation, "segmentation"},
                                         {LabelKind::none, "none"}})
NLOHMANN_JSON_SERIALIZE_ENUM(DatasetRole, {{DatasetRole::pretrain, "pretrain"},
                                           {DatasetRole::evaluate, "evaluate"}})

// Source resolution, either as objective power or as microns per pixel.
struct Magnification {
  enum class Kind { objective, mpp } kind = Kind::objective;
  double value = 40.0;
};

// How a dataset used for both pretraining and evaluation is divided at the
// source-image level. Exactly one of count/fraction is set.
struct HoldOutSpec {
  std::optional<int> count;
  std::optional<double> fraction;
  std::uint64_t seed = 0;
};

struct DatasetRecord {
  std::string name;
  Organ organ = Organ::other;
  LabelKind label_kind = LabelKind::none;
  std::set<DatasetRole> roles;
  fs::path root_path;
  std::optional<Magnification> magnification;
  // Measured nucleus diameters (pixels) for datasets without a known resolution.
  std::vector<double> nucleus_diameters_px;
  std::vector<std::string> class_names;
  std::optional<HoldOutSpec> hold_out;
  // Filled in once split_dataset_disjoint has run for the record.
  std::vector<std::string> held_out_ids;
  // Output directory of the preprocess stage, if it has run.
  fs::path patches_dir;

  bool has_role(DatasetRole r) const { return roles.contains(r); }
};

// Held-out sizes used when a dual-role record does not specify its own.
inline std::optional<int> default_held_out_count(const std::string& name) {
  if (name == "FNAC2019") return 100;
  if (name == "MLBC") return 140;
  return std::nullopt;
}
inline constexpr double kDefaultHeldOutFraction = 0.2;

inline void to_json(json& j, const DatasetRecord& r) {
  j = json{{"name", r.name},
           {"organ", r.organ},
           {"label_kind", r.label_kind},
           {"roles", std::vector<DatasetRole>(r.roles.begin(), r.roles.end())},
           {"root_path", r.root_path.string()},
           {"class_names", r.class_names}};
  if (r.magnification) {
    j["magnification"] = {
        {"kind", r.magnification->kind == Magnification::Kind::objective ? "objective" : "mpp"},
        {"value", r.magnification->value}};
  }
  if (!r.nucleus_diameters_px.empty()) j["nucleus_diameters_px"] = r.nucleus_diameters_px;
  if (r.hold_out) {
    json h{{"seed", r.hold_out->seed}};
    if (r.hold_out->count) h["count"] = *r.hold_out->count;
    if (r.hold_out->fraction) h["fraction"] = *r.hold_out->fraction;
    j["hold_out"] = h;
  }
  if (!r.held_out_ids.empty()) j["held_out_ids"] = r.held_out_ids;
  if (!r.patches_dir.empty()) j["patches_dir"] = r.patches_dir.string();
}

inline void from_json(const json& j, DatasetRecord& r) {
  r.name = j.at("name").get<std::string>();
  r.organ = enum_value(j, "organ", Organ::other);
  r.label_kind = enum_value(j, "label_kind", LabelKind::none);
  r.roles.clear();
  for (const auto& role : j.at("roles")) r.roles.insert(enum_from_json<DatasetRole>(role, "role"));
  r.root_path = j.at("root_path").get<std::string>();
  r.class_names = j.value("class_names", std::vector<std::string>{});
  r.magnification.reset();
  if (j.contains("magnification")) {
    const auto& m = j["magnification"];
    Magnification mag;
    const auto kind = m.at("kind").get<std::string>();
    CYTOFM_REQUIRE(kind == "objective" || kind == "mpp", "magnification.kind must be objective or mpp");
    mag.kind = kind == "objective" ? Magnification::Kind::objective : Magnification::Kind::mpp;
    mag.value = m.at("value").get<double>();
    r.magnification = mag;
  }
  r.nucleus_diameters_px = j.value("nucleus_diameters_px", std::vector<double>{});
  r.hold_out.reset();
  if (j.contains("hold_out")) {
    HoldOutSpec h;
    const auto& hj = j["hold_out"];
    if (hj.contains("count")) h.count = hj["count"].get<int>();
    if (hj.contains("fraction")) h.fraction = hj["fraction"].get<double>();
    h.seed = hj.value("seed", std::uint64_t{0});
    r.hold_out = h;
  }
  r.held_out_ids = j.value("held_out_ids", std::vector<std::string>{});
  r.patches_dir = j.value("patches_dir", std::string{});
}

inline void validate_record(const DatasetRecord& r) {
  CYTOFM_REQUIRE(!r.name.empty(), "dataset name must not be empty");
  CYTOFM_REQUIRE(!r.roles.empty(), "dataset '" + r.name + "' needs at least one role");
  std::set<std::string> unique(r.class_names.begin(), r.class_names.end());
  CYTOFM_REQUIRE(unique.size() == r.class_names.size(),
                 "dataset '" + r.name + "' has duplicate class names");
  if (r.label_kind == LabelKind::binary)
    CYTOFM_REQUIRE(r.class_names.size() == 2,
                   "binary dataset '" + r.name + "' must have exactly 2 class names, got " +
                       std::to_string(r.class_names.size()));
  if (r.magnification)
    CYTOFM_REQUIRE(r.magnification->value > 0, "magnification must be positive");
  for (double d : r.nucleus_diameters_px) CYTOFM_REQUIRE(d > 0, "nucleus diameters must be positive");
  if (r.hold_out) {
    CYTOFM_REQUIRE(r.hold_out->count.has_value() != r.hold_out->fraction.has_value(),
                   "hold_out needs exactly one of count or fraction");
    if (r.hold_out->fraction)
      CYTOFM_REQUIRE(*r.hold_out->fraction > 0 && *r.hold_out->fraction < 1,
                     "hold_out fraction must lie in (0,1)");
    if (r.hold_out->count) CYTOFM_REQUIRE(*r.hold_out->count >= 1, "hold_out count must be >= 1");
  }
  if (r.has_role(DatasetRole::pretrain) && r.has_role(DatasetRole::evaluate))
    CYTOFM_REQUIRE(r.hold_out.has_value(),
                   "dataset '" + r.name + "' is used for pretraining and evaluation and needs a hold_out split");
}

// JSON-backed registry (datasets.json). Relative root paths resolve against
// the registry file's directory.
class DatasetRegistry {
 public:
  DatasetRegistry() = default;
  explicit DatasetRegistry(fs::path file) : file_(std::move(file)) {}

  static DatasetRegistry load(const fs::path& file) {
    DatasetRegistry reg(file);
    if (!fs::exists(file)) return reg;
    const json j = read_json(file);
    for (const auto& rj : j.at("datasets")) {
      DatasetRecord r = rj.get<DatasetRecord>();
      validate_record(r);
      reg.records_.push_back(std::move(r));
    }
    return reg;
  }

  void save() const {
    CYTOFM_REQUIRE(!file_.empty(), "registry has no backing file");
    json arr = json::array();
    for (const auto& r : records_) arr.push_back(r);
    write_json(file_, json{{"version", 1}, {"datasets", arr}});
  }

  // Validates, fills default hold-out sizes for dual-role records, appends and
  // persists (when file-backed).
  const DatasetRecord& register_dataset(DatasetRecord entry) {
    CYTOFM_REQUIRE(!entry.roles.empty(), "dataset '" + entry.name + "' needs at least one role");
    if (entry.has_role(DatasetRole::pretrain) && entry.has_role(DatasetRole::evaluate) && !entry.hold_out) {
      HoldOutSpec h;
      if (auto c = default_held_out_count(entry.name)) h.count = *c;
      else h.fraction = kDefaultHeldOutFraction;
      entry.hold_out = h;
    }
    validate_record(entry);
    CYTOFM_REQUIRE(find(entry.name) == nullptr, "dataset '" + entry.name + "' is already registered");
    const fs::path root = resolve(entry.root_path);
    CYTOFM_REQUIRE(fs::exists(root), "dataset root does not exist: " + root.string());
    records_.push_back(std::move(entry));
    if (!file_.empty()) save();
    return records_.back();
  }

  const DatasetRecord* find(const std::string& name) const {
    auto it = std::find_if(records_.begin(), records_.end(), [&](const auto& r) { return r.name == name; });
    return it == records_.end() ? nullptr : &*it;
  }
  DatasetRecord* find(const std::string& name) {
    auto it = std::find_if(records_.begin(), records_.end(), [&](const auto& r) { return r.name == name; });
    return it == records_.end() ? nullptr : &*it;
  }
  const DatasetRecord& get(const std::string& name) const {
    const auto* r = find(name);
    CYTOFM_REQUIRE(r != nullptr, "unknown dataset '" + name + "'");
    return *r;
  }
  DatasetRecord& get(const std::string& name) {
    auto* r = find(name);
    CYTOFM_REQUIRE(r != nullptr, "unknown dataset '" + name + "'");
    return *r;
  }

  fs::path resolve(const fs::path& p) const {
    if (p.is_absolute() || file_.empty()) return p;
    return file_.parent_path() / p;
  }

  const std::vector<DatasetRecord>& records() const { return records_; }
  const fs::path& file() const { return file_; }

 private:
  fs::path file_;
  std::vector<DatasetRecord> records_;
};

// Source image ids (file stems) under a dataset root, sorted.
inline std::vector<std::pair<std::string, fs::path>> list_source_images(const fs::path& root) {
  CYTOFM_REQUIRE(fs::is_directory(root), "dataset root is not a directory: " + root.string());
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && is_image_file(e.path())) out.emplace_back(e.path().stem().string(), e.path());
  }
  std::sort(out.begin(), out.end());
  for (std::size_t i = 1; i < out.size(); ++i)
    CYTOFM_REQUIRE(out[i].first != out[i - 1].first, "duplicate source image id '" + out[i].first + "'");
  return out;
}

}  // namespace cytofm
