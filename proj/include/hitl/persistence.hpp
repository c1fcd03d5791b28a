#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hitl/checkpoint.hpp"
#include "hitl/dataset.hpp"
#include "hitl/guidance.hpp"
#include "hitl/image_io.hpp"

namespace hitl {

namespace fs = std::filesystem;

inline constexpr int kSnapshotSchemaVersion = 1;
inline constexpr int kAnnotationLogVersion = 1;
inline constexpr std::uint8_t kDistractorMaskValue = 255;

/// Writes to a sibling temp file, then renames over the target.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  write_file_bytes(tmp, bytes);
  fs::rename(tmp, path);
}

inline nlohmann::json read_json_file(const fs::path& path) {
  const std::string text = read_file_bytes(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json_file(const fs::path& path, const nlohmann::json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------- datasets

struct FolderOptions {
  std::size_t input_size = 64;
  std::size_t channels = 3;
};

namespace detail {

inline std::vector<std::uint8_t> resize_nearest(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w,
                                                std::size_t oh, std::size_t ow) {
  std::vector<std::uint8_t> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) out[y * ow + x] = m[(y * h / oh) * w + x * w / ow];
  return out;
}

}  // namespace detail

/// Loads the images listed in a manifest {images: [{id, file, label, mask?}],
/// classes: [...]}; file paths are relative to the manifest's directory.
inline Dataset load_image_folder(const fs::path& manifest_path, const FolderOptions& opt = {}) {
  const nlohmann::json manifest = read_json_file(manifest_path);
  const fs::path root = manifest_path.parent_path();
  Dataset d;
  d.class_names = manifest.value("classes", std::vector<std::string>{});
  for (const auto& entry : manifest.value("images", nlohmann::json::array())) {
    const fs::path file = root / entry.at("file").get<std::string>();
    Sample s;
    s.id = entry.at("id").get<std::string>();
    s.label = entry.at("label").get<int>();
    if (!d.class_names.empty() && (s.label < 0 || s.label >= static_cast<int>(d.class_names.size()))) {
      throw IngestionError("label " + std::to_string(s.label) + " of " + s.id + " is not a listed class");
    }
    RawImage raw;
    try {
      raw = decode_png(read_file_bytes(file));
    } catch (const IngestionError& e) {
      throw IngestionError(file.string() + ": " + e.what());
    }
    s.image = resize_area(from_raw(raw, opt.channels), opt.input_size, opt.input_size);
    if (entry.contains("mask")) {
      const fs::path mask_file = root / entry.at("mask").get<std::string>();
      RawImage m;
      try {
        m = decode_png(read_file_bytes(mask_file));
      } catch (const IngestionError& e) {
        throw IngestionError(mask_file.string() + ": " + e.what());
      }
      if (m.channels != 1) throw IngestionError(mask_file.string() + ": mask must be grayscale");
      const auto px = detail::resize_nearest(m.pixels, m.height, m.width, opt.input_size, opt.input_size);
      s.target_mask.resize(px.size());
      s.distractor_mask.resize(px.size());
      for (std::size_t i = 0; i < px.size(); ++i) {
        s.distractor_mask[i] = px[i] == kDistractorMaskValue ? 1 : 0;
        s.target_mask[i] = px[i] == kDistractorMaskValue ? 0 : px[i];
      }
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

/// Writes images/<id>.png, masks/<id>.png (0 background, k target instance k,
/// 255 distractor) and manifest.json into `dir`.
inline void export_dataset(const Dataset& d, const fs::path& dir) {
  fs::create_directories(dir / "images");
  nlohmann::json images = nlohmann::json::array();
  for (const auto& s : d.samples) {
    nlohmann::json entry = {{"id", s.id}, {"file", "images/" + s.id + ".png"}, {"label", s.label}};
    write_file_bytes(dir / "images" / (s.id + ".png"), encode_png(to_raw(s.image)));
    if (s.has_masks()) {
      fs::create_directories(dir / "masks");
      RawImage m{s.width(), s.height(), 1, std::vector<std::uint8_t>(s.width() * s.height())};
      for (std::size_t i = 0; i < m.pixels.size(); ++i) {
        m.pixels[i] = s.distractor_mask[i] ? kDistractorMaskValue : s.target_mask[i];
      }
      write_file_bytes(dir / "masks" / (s.id + ".png"), encode_png(m));
      entry["mask"] = "masks/" + s.id + ".png";
    }
    images.push_back(entry);
  }
  write_json_file(dir / "manifest.json", {{"images", images}, {"classes", d.class_names}});
}

inline const std::vector<std::string>& split_names() {
  static const std::vector<std::string> names{"train", "val", "test_biased", "test_decorrelated"};
  return names;
}

inline void export_biased_datasets(const BiasedDatasets& data, const BiasedDatasetSpec& spec, const fs::path& dir) {
  const Dataset* parts[] = {&data.train, &data.val, &data.test_biased, &data.test_decorrelated};
  nlohmann::json splits = nlohmann::json::object();
  for (std::size_t i = 0; i < 4; ++i) {
    export_dataset(*parts[i], dir / split_names()[i]);
    splits[split_names()[i]] = split_names()[i] + "/manifest.json";
  }
  write_json_file(dir / "manifest.json", {{"spec", spec}, {"splits", splits}, {"classes", data.train.class_names}});
}

struct LoadedBenchmark {
  BiasedDatasetSpec spec;
  BiasedDatasets data;
};

inline LoadedBenchmark load_biased_datasets(const fs::path& dir) {
  const auto top = read_json_file(dir / "manifest.json");
  LoadedBenchmark out;
  out.spec = top.value("spec", nlohmann::json::object()).get<BiasedDatasetSpec>();
  FolderOptions opt{out.spec.image_size, 3};
  Dataset* parts[] = {&out.data.train, &out.data.val, &out.data.test_biased, &out.data.test_decorrelated};
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& splits = top.at("splits");
    if (!splits.contains(split_names()[i])) throw IngestionError(dir.string() + ": no split " + split_names()[i]);
    *parts[i] = load_image_folder(dir / splits.at(split_names()[i]).get<std::string>(), opt);
  }
  return out;
}

// ---------------------------------------------------------------- annotation log

/// Append-only JSON Lines log; the first line is a format header.
class AnnotationLog {
 public:
  explicit AnnotationLog(fs::path path) : path_(std::move(path)) {
    if (!fs::exists(path_) || fs::file_size(path_) == 0) {
      if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
      std::ofstream f(path_, std::ios::trunc);
      f << nlohmann::json{{"format", "hitl-annotations"}, {"version", kAnnotationLogVersion}}.dump() << "\n";
    }
  }
  void append(const Annotation& a) {
    std::ofstream f(path_, std::ios::app);
    if (!f) throw Error("cannot append to " + path_.string());
    f << nlohmann::json(a).dump() << "\n";
    f.flush();
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

inline std::vector<Annotation> read_annotation_log(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IngestionError("cannot read " + path.string());
  std::vector<Annotation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw IncompatibleFormatError(path.string() + ": malformed record on line " + std::to_string(lineno));
    }
    if (lineno == 1) {
      if (j.value("format", std::string()) != "hitl-annotations" || j.value("version", -1) != kAnnotationLogVersion) {
        throw IncompatibleFormatError(path.string() + ": not a version " + std::to_string(kAnnotationLogVersion) +
                                      " annotation log");
      }
      continue;
    }
    try {
      out.push_back(j.get<Annotation>());
    } catch (const std::exception& e) {
      throw IncompatibleFormatError(path.string() + ": bad annotation on line " + std::to_string(lineno) + ": " +
                                    e.what());
    }
  }
  if (lineno == 0) throw IncompatibleFormatError(path.string() + ": empty annotation log");
  return out;
}

// ---------------------------------------------------------------- snapshots and checkpoints

inline void save_snapshot(const fs::path& path, const std::string& kind, const nlohmann::json& body) {
  write_json_file(path, {{"schema_version", kSnapshotSchemaVersion}, {"kind", kind}, {"body", body}});
}

inline nlohmann::json load_snapshot(const fs::path& path, const std::string& kind) {
  nlohmann::json j;
  try {
    j = read_json_file(path);
  } catch (const IngestionError& e) {
    throw IncompatibleFormatError(e.what());
  }
  if (!j.is_object() || j.value("schema_version", -1) != kSnapshotSchemaVersion || j.value("kind", "") != kind) {
    throw IncompatibleFormatError(path.string() + ": expected a schema version " +
                                  std::to_string(kSnapshotSchemaVersion) + " " + kind + " snapshot");
  }
  return j.at("body");
}

/// <dir>/round_007.ckpt
inline fs::path round_checkpoint_path(const fs::path& dir, int round) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "round_%03d.ckpt", round);
  return dir / buf;
}

inline void save_model(const fs::path& path, const Classifier& model,
                       const nlohmann::json& extra = nlohmann::json::object()) {
  write_file_atomic(path, encode_checkpoint(model.to_checkpoint(extra)));
}

inline Classifier load_model(const fs::path& path) { return Classifier::from_checkpoint(load_checkpoint(path)); }

}  // namespace hitl
