#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vqacl/encoders.hpp"
#include "vqacl/rng.hpp"

namespace vqacl {

// ---------------------------------------------------------------------------
// scenes
// ---------------------------------------------------------------------------

enum class Cell : std::uint8_t {
  kEmpty = 0,
  kBuildingSmall,
  kBuildingLarge,
  kRoad,
  kWater,
  kTree,
  kField,
};
inline constexpr int kNumCellKinds = 7;

inline char cell_code(Cell c) {
  static constexpr char codes[kNumCellKinds] = {'.', 'b', 'B', 'r', 'w', 't', 'f'};
  return codes[static_cast<int>(c)];
}

inline Cell cell_from_code(char ch) {
  switch (ch) {
    case '.': return Cell::kEmpty;
    case 'b': return Cell::kBuildingSmall;
    case 'B': return Cell::kBuildingLarge;
    case 'r': return Cell::kRoad;
    case 'w': return Cell::kWater;
    case 't': return Cell::kTree;
    case 'f': return Cell::kField;
    default: throw std::runtime_error(std::string("unknown cell code '") + ch + "'");
  }
}

struct SceneConfig {
  int grid = 8;
  double urban_threshold = 0.08;  // urban iff building fraction >= threshold
  std::array<double, kNumCellKinds> category_probs = {0.713, 0.05, 0.03, 0.09,
                                                      0.012, 0.015, 0.09};
};

struct Scene {
  int id = 0;
  int grid = 0;
  std::vector<Cell> cells;  // row-major G x G
  std::array<int, kNumCellKinds> counts{};
  bool urban = false;

  int count(Cell c) const { return counts[static_cast<int>(c)]; }
};

namespace detail {
inline constexpr std::uint64_t kStreamCells = 0xce11;
inline constexpr std::uint64_t kStreamNoise = 0x401e;
inline constexpr std::uint64_t kStreamQuestion = 0x9e57;
inline constexpr std::uint64_t kStreamSplit = 0x5b17;
}  // namespace detail

inline void validate_scene_config(const SceneConfig& cfg) {
  if (cfg.grid < 2) throw std::invalid_argument("scene config: grid must be >= 2");
  double sum = 0.0;
  for (double p : cfg.category_probs) {
    if (p < 0.0) throw std::invalid_argument("scene config: negative category probability");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("scene config: category probabilities must sum to 1");
}

// Cells drawn independently via a counter-based generator keyed by
// (seed, scene index, cell index): identical keys give identical scenes
// regardless of generation order.
inline Scene generate_scene(std::uint64_t seed, int index, const SceneConfig& cfg) {
  validate_scene_config(cfg);
  Scene s;
  s.id = index;
  s.grid = cfg.grid;
  const int total = cfg.grid * cfg.grid;
  s.cells.resize(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) {
    const double u = unit_double(hash_key(seed, detail::kStreamCells,
                                          static_cast<std::uint64_t>(index),
                                          static_cast<std::uint64_t>(i)));
    double acc = 0.0;
    int kind = kNumCellKinds - 1;
    for (int k = 0; k < kNumCellKinds; ++k) {
      acc += cfg.category_probs[static_cast<std::size_t>(k)];
      if (u < acc) {
        kind = k;
        break;
      }
    }
    s.cells[static_cast<std::size_t>(i)] = static_cast<Cell>(kind);
    ++s.counts[static_cast<std::size_t>(kind)];
  }
  const int buildings = s.count(Cell::kBuildingSmall) + s.count(Cell::kBuildingLarge);
  s.urban = static_cast<double>(buildings) >= cfg.urban_threshold * static_cast<double>(total);
  return s;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

inline const std::array<std::array<std::uint8_t, 3>, kNumCellKinds>& cell_palette() {
  static const std::array<std::array<std::uint8_t, 3>, kNumCellKinds> palette = {{
      {214, 211, 196},  // empty
      {204, 64, 52},    // small building
      {116, 48, 96},    // large building
      {72, 72, 80},     // road
      {52, 100, 208},   // water
      {36, 128, 64},    // tree
      {208, 196, 88},   // field
  }};
  return palette;
}

// Flat-color blocks per cell (small buildings at half cell size on an empty
// background) plus seeded additive uniform noise in [-8, 8], clamped.
inline std::vector<std::uint8_t> render_scene(const Scene& scene, int image_size,
                                              std::uint64_t seed) {
  if (image_size % scene.grid != 0)
    throw std::invalid_argument("render_scene: image size not divisible by grid");
  const int cell_px = image_size / scene.grid;
  const auto& palette = cell_palette();
  std::vector<std::uint8_t> img(static_cast<std::size_t>(image_size) * image_size * 3);

  for (int gy = 0; gy < scene.grid; ++gy)
    for (int gx = 0; gx < scene.grid; ++gx) {
      const Cell cell = scene.cells[static_cast<std::size_t>(gy * scene.grid + gx)];
      const auto& bg = cell == Cell::kBuildingSmall ? palette[0]
                                                    : palette[static_cast<int>(cell)];
      for (int y = 0; y < cell_px; ++y)
        for (int x = 0; x < cell_px; ++x) {
          const std::size_t p =
              (static_cast<std::size_t>(gy * cell_px + y) * image_size + gx * cell_px + x) * 3;
          img[p] = bg[0];
          img[p + 1] = bg[1];
          img[p + 2] = bg[2];
        }
      if (cell == Cell::kBuildingSmall) {
        const auto& fg = palette[static_cast<int>(Cell::kBuildingSmall)];
        const int half = cell_px / 2, off = cell_px / 4;
        for (int y = 0; y < half; ++y)
          for (int x = 0; x < half; ++x) {
            const std::size_t p =
                (static_cast<std::size_t>(gy * cell_px + off + y) * image_size +
                 gx * cell_px + off + x) * 3;
            img[p] = fg[0];
            img[p + 1] = fg[1];
            img[p + 2] = fg[2];
          }
      }
    }

  for (std::size_t i = 0; i < img.size(); ++i) {
    const std::uint64_t h = hash_key(seed, detail::kStreamNoise, i);
    const int delta = static_cast<int>(h % 17) - 8;
    const int v = static_cast<int>(img[i]) + delta;
    img[i] = static_cast<std::uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v));
  }
  return img;
}

// ---------------------------------------------------------------------------
// questions
// ---------------------------------------------------------------------------

enum class QuestionType { kRuralUrban = 0, kPresence, kComparison, kArea, kCount };
inline constexpr int kNumQuestionTypes = 5;

inline const char* type_name(QuestionType t) {
  static constexpr const char* names[kNumQuestionTypes] = {
      "rural_urban", "presence", "comparison", "area", "count"};
  return names[static_cast<int>(t)];
}

inline QuestionType parse_type(const std::string& s) {
  for (int i = 0; i < kNumQuestionTypes; ++i)
    if (s == type_name(static_cast<QuestionType>(i))) return static_cast<QuestionType>(i);
  throw std::runtime_error("unknown question type '" + s + "'");
}

inline const char* category_singular(Cell c) {
  static constexpr const char* names[kNumCellKinds] = {
      "empty cell", "small building", "large building", "road", "water area", "tree", "field"};
  return names[static_cast<int>(c)];
}

inline const char* category_plural(Cell c) {
  static constexpr const char* names[kNumCellKinds] = {
      "empty cells", "small buildings", "large buildings", "roads", "water areas",
      "trees", "fields"};
  return names[static_cast<int>(c)];
}

// Answer vocabulary: every label a template can produce, in a fixed order.
inline const std::vector<std::string>& answer_labels() {
  static const std::vector<std::string> labels = {
      "yes", "no", "rural", "urban", "0", "1", "2", "3", "4", "5-10", "11+",
      "zero", "small", "medium", "large"};
  return labels;
}

inline std::string count_answer(int count) {
  const int capped = std::min(count, 16);
  if (capped <= 4) return std::to_string(capped);
  if (capped <= 10) return "5-10";
  return "11+";
}

inline std::string area_answer(int cells) {
  if (cells == 0) return "zero";
  if (cells <= 4) return "small";
  if (cells <= 12) return "medium";
  return "large";
}

struct Triplet {
  int id = 0;
  std::string image;  // file name relative to the dataset images directory
  std::string question;
  std::string answer;
  QuestionType type = QuestionType::kPresence;
  int scene_id = 0;

  bool operator==(const Triplet& other) const {
    return id == other.id && image == other.image && question == other.question &&
           answer == other.answer && type == other.type && scene_id == other.scene_id;
  }
};

namespace detail {

inline const std::vector<Cell>& presence_pool() {
  static const std::vector<Cell> pool = {Cell::kRoad, Cell::kWater, Cell::kTree,
                                         Cell::kBuildingLarge};
  return pool;
}
inline const std::vector<Cell>& count_pool() {
  static const std::vector<Cell> pool = {Cell::kBuildingSmall, Cell::kBuildingLarge,
                                         Cell::kRoad, Cell::kWater};
  return pool;
}
inline const std::vector<Cell>& area_pool() {
  static const std::vector<Cell> pool = {Cell::kRoad, Cell::kField, Cell::kWater};
  return pool;
}
inline const std::vector<std::pair<Cell, Cell>>& comparison_pool() {
  static const std::vector<std::pair<Cell, Cell>> pool = {
      {Cell::kRoad, Cell::kBuildingSmall},
      {Cell::kTree, Cell::kWater},
      {Cell::kBuildingSmall, Cell::kBuildingLarge},
      {Cell::kField, Cell::kRoad}};
  return pool;
}

inline Triplet make_question(const Scene& scene, QuestionType type, std::size_t variant) {
  Triplet t;
  t.type = type;
  t.scene_id = scene.id;
  switch (type) {
    case QuestionType::kRuralUrban: {
      t.question = "Is it a rural or an urban area?";
      t.answer = scene.urban ? "urban" : "rural";
      break;
    }
    case QuestionType::kPresence: {
      const Cell c = presence_pool()[variant % presence_pool().size()];
      t.question = std::string("Is a ") + category_singular(c) + " present?";
      t.answer = scene.count(c) > 0 ? "yes" : "no";
      break;
    }
    case QuestionType::kComparison: {
      const auto& [a, b] = comparison_pool()[variant % comparison_pool().size()];
      t.question = std::string("Are there more ") + category_plural(a) + " than " +
                   category_plural(b) + "?";
      t.answer = scene.count(a) > scene.count(b) ? "yes" : "no";
      break;
    }
    case QuestionType::kArea: {
      const Cell c = area_pool()[variant % area_pool().size()];
      t.question = std::string("What is the area covered by ") + category_plural(c) + "?";
      t.answer = area_answer(scene.count(c));
      break;
    }
    case QuestionType::kCount: {
      const Cell c = count_pool()[variant % count_pool().size()];
      t.question = std::string("What is the amount of ") + category_plural(c) + "?";
      t.answer = count_answer(scene.count(c));
      break;
    }
  }
  return t;
}

}  // namespace detail

// Instantiates per_type_counts[type] questions per type from the fixed
// templates, answers derived from scene metadata. Template variants are
// chosen by a counter-based draw keyed by (seed, scene id, slot); repeated
// variants within a scene advance to the next pool entry.
inline std::vector<Triplet> instantiate_questions(
    const Scene& scene, const std::array<int, kNumQuestionTypes>& per_type_counts,
    std::uint64_t seed, int id_base = 0) {
  std::vector<Triplet> out;
  std::vector<std::string> seen;
  int slot = 0;
  for (int type_i = 0; type_i < kNumQuestionTypes; ++type_i) {
    const QuestionType type = static_cast<QuestionType>(type_i);
    for (int k = 0; k < per_type_counts[static_cast<std::size_t>(type_i)]; ++k) {
      std::size_t variant = static_cast<std::size_t>(
          hash_key(seed, detail::kStreamQuestion, static_cast<std::uint64_t>(scene.id),
                   static_cast<std::uint64_t>(slot)));
      Triplet t = detail::make_question(scene, type, variant);
      for (int tries = 0; tries < 8; ++tries) {
        bool dup = false;
        for (const std::string& q : seen) dup = dup || q == t.question;
        if (!dup) break;
        t = detail::make_question(scene, type, ++variant);
      }
      seen.push_back(t.question);
      t.id = id_base + static_cast<int>(out.size());
      out.push_back(std::move(t));
      ++slot;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset
// ---------------------------------------------------------------------------

enum class Split { kTrain = 0, kVal, kTest };

inline const char* split_name(Split s) {
  static constexpr const char* names[3] = {"train", "val", "test"};
  return names[static_cast<int>(s)];
}

inline Split parse_split(const std::string& s) {
  for (int i = 0; i < 3; ++i)
    if (s == split_name(static_cast<Split>(i))) return static_cast<Split>(i);
  throw std::runtime_error("unknown split '" + s + "'");
}

struct Dataset {
  std::vector<Scene> scenes;                       // ordered by id
  std::vector<Triplet> triplets;                   // ordered by id
  std::map<int, std::vector<std::uint8_t>> images; // scene id -> RGB8 bytes
  std::map<int, Split> splits;                     // scene id -> split
  int image_size = 0;

  const std::vector<std::uint8_t>& image_bytes(int scene_id) const {
    const auto it = images.find(scene_id);
    if (it == images.end())
      throw std::runtime_error("dataset: no image for scene " + std::to_string(scene_id));
    return it->second;
  }

  Split split_of(int scene_id) const {
    const auto it = splits.find(scene_id);
    if (it == splits.end())
      throw std::runtime_error("dataset: no split for scene " + std::to_string(scene_id));
    return it->second;
  }

  std::vector<int> split_triplets(Split s) const {
    std::vector<int> idx;
    for (std::size_t i = 0; i < triplets.size(); ++i)
      if (split_of(triplets[i].scene_id) == s) idx.push_back(static_cast<int>(i));
    return idx;
  }
};

struct GenerateConfig {
  int scenes = 600;
  int questions_per_scene = 6;
  int image_size = 64;
  std::uint64_t seed = 7;
  SceneConfig scene;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
};

inline Dataset generate_dataset(const GenerateConfig& cfg) {
  if (cfg.scenes <= 0) throw std::invalid_argument("generate_dataset: empty dataset");
  if (cfg.questions_per_scene < kNumQuestionTypes)
    throw std::invalid_argument("generate_dataset: need at least one question per type");
  validate_scene_config(cfg.scene);
  if (cfg.image_size % cfg.scene.grid != 0)
    throw std::invalid_argument("generate_dataset: image size not divisible by grid");

  Dataset ds;
  ds.image_size = cfg.image_size;
  std::array<int, kNumQuestionTypes> per_type{};
  per_type.fill(1);
  // extra questions rotate over the non-binary-template types
  static constexpr QuestionType extra_types[4] = {
      QuestionType::kPresence, QuestionType::kComparison, QuestionType::kArea,
      QuestionType::kCount};

  int next_id = 0;
  for (int i = 0; i < cfg.scenes; ++i) {
    Scene scene = generate_scene(cfg.seed, i, cfg.scene);
    std::array<int, kNumQuestionTypes> counts = per_type;
    for (int extra = 0; extra < cfg.questions_per_scene - kNumQuestionTypes; ++extra) {
      const std::uint64_t h = hash_key(cfg.seed, detail::kStreamQuestion,
                                       static_cast<std::uint64_t>(i),
                                       0xe77a + static_cast<std::uint64_t>(extra));
      ++counts[static_cast<std::size_t>(extra_types[h % 4])];
    }
    std::vector<Triplet> qs = instantiate_questions(scene, counts, cfg.seed, next_id);
    next_id += static_cast<int>(qs.size());
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%06d.ppm", scene.id);
    for (Triplet& t : qs) t.image = name;
    ds.images.emplace(scene.id,
                      render_scene(scene, cfg.image_size,
                                   hash_key(cfg.seed, detail::kStreamNoise,
                                            static_cast<std::uint64_t>(scene.id))));
    ds.triplets.insert(ds.triplets.end(), qs.begin(), qs.end());
    ds.scenes.push_back(std::move(scene));
  }

  // scene-level 80/10/10 split: no image appears in two splits
  std::vector<int> order(static_cast<std::size_t>(cfg.scenes));
  for (int i = 0; i < cfg.scenes; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(hash_key(cfg.seed, detail::kStreamSplit));
  rng.shuffle(order);
  const int n_train = static_cast<int>(std::llround(cfg.train_fraction * cfg.scenes));
  const int n_val = static_cast<int>(std::llround(cfg.val_fraction * cfg.scenes));
  for (int i = 0; i < cfg.scenes; ++i) {
    const Split s = i < n_train ? Split::kTrain
                                : (i < n_train + n_val ? Split::kVal : Split::kTest);
    ds.splits.emplace(order[static_cast<std::size_t>(i)], s);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// dataset files: PPM images + index.tsv + scenes.tsv + splits.tsv
// ---------------------------------------------------------------------------

inline void write_ppm(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb,
                      int width, int height) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "P6\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!f) throw std::runtime_error("short write to " + path.string());
}

inline std::vector<std::uint8_t> read_ppm(const std::filesystem::path& path, int& width,
                                          int& height) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("missing image file " + path.string());
  std::string magic;
  f >> magic;
  int maxval = 0;
  if (!(f >> width >> height >> maxval) || magic != "P6" || maxval != 255 || width <= 0 ||
      height <= 0)
    throw std::runtime_error("bad image header: " + path.string());
  f.get();  // single whitespace after maxval
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(width) * height * 3);
  f.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(rgb.size()))
    throw std::runtime_error("image byte count mismatch: " + path.string());
  return rgb;
}

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t pos = 0;
  while (true) {
    const std::size_t tab = line.find('\t', pos);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(pos));
      break;
    }
    fields.push_back(line.substr(pos, tab - pos));
    pos = tab + 1;
  }
  return fields;
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");

  for (const Scene& s : ds.scenes) {
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%06d.ppm", s.id);
    write_ppm(dir / "images" / name, ds.image_bytes(s.id), ds.image_size, ds.image_size);
  }

  std::ofstream index(dir / "index.tsv");
  index << "id\timage\tquestion\tanswer\tqtype\tscene_id\n";
  for (const Triplet& t : ds.triplets)
    index << t.id << '\t' << t.image << '\t' << t.question << '\t' << t.answer << '\t'
          << type_name(t.type) << '\t' << t.scene_id << '\n';

  std::ofstream scenes(dir / "scenes.tsv");
  scenes << "scene_id\tgrid\turban_label\n";
  for (const Scene& s : ds.scenes) {
    std::string grid;
    for (Cell c : s.cells) grid.push_back(cell_code(c));
    scenes << s.id << '\t' << grid << '\t' << (s.urban ? "urban" : "rural") << '\n';
  }

  std::ofstream splits(dir / "splits.tsv");
  splits << "scene_id\tsplit\n";
  for (const auto& [scene_id, split] : ds.splits)
    splits << scene_id << '\t' << split_name(split) << '\n';

  if (!index || !scenes || !splits)
    throw std::runtime_error("write_dataset: short write under " + dir.string());
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Dataset ds;

  std::ifstream scenes_f(dir / "scenes.tsv");
  if (!scenes_f) throw std::runtime_error("missing scenes.tsv in " + dir.string());
  std::string line;
  std::getline(scenes_f, line);  // header
  int line_no = 1;
  while (std::getline(scenes_f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = detail::split_tabs(line);
    if (fields.size() != 3)
      throw std::runtime_error("scenes.tsv: malformed line " + std::to_string(line_no));
    Scene s;
    s.id = std::stoi(fields[0]);
    const std::string& grid = fields[1];
    int g = 0;
    while (g * g < static_cast<int>(grid.size())) ++g;
    if (g * g != static_cast<int>(grid.size()))
      throw std::runtime_error("scenes.tsv: non-square grid on line " + std::to_string(line_no));
    s.grid = g;
    for (char ch : grid) {
      const Cell c = cell_from_code(ch);
      s.cells.push_back(c);
      ++s.counts[static_cast<int>(c)];
    }
    s.urban = fields[2] == "urban";
    ds.scenes.push_back(std::move(s));
  }

  std::ifstream index_f(dir / "index.tsv");
  if (!index_f) throw std::runtime_error("missing index.tsv in " + dir.string());
  std::getline(index_f, line);  // header
  line_no = 1;
  while (std::getline(index_f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = detail::split_tabs(line);
    if (fields.size() != 6)
      throw std::runtime_error("index.tsv: malformed line " + std::to_string(line_no));
    Triplet t;
    try {
      t.id = std::stoi(fields[0]);
      t.scene_id = std::stoi(fields[5]);
    } catch (const std::exception&) {
      throw std::runtime_error("index.tsv: malformed line " + std::to_string(line_no));
    }
    t.image = fields[1];
    t.question = fields[2];
    t.answer = fields[3];
    t.type = parse_type(fields[4]);
    ds.triplets.push_back(std::move(t));
  }

  std::ifstream splits_f(dir / "splits.tsv");
  if (!splits_f) throw std::runtime_error("missing splits.tsv in " + dir.string());
  std::getline(splits_f, line);  // header
  line_no = 1;
  while (std::getline(splits_f, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = detail::split_tabs(line);
    if (fields.size() != 2)
      throw std::runtime_error("splits.tsv: malformed line " + std::to_string(line_no));
    ds.splits.emplace(std::stoi(fields[0]), parse_split(fields[1]));
  }

  for (const Triplet& t : ds.triplets) {
    if (ds.images.count(t.scene_id)) continue;
    const fs::path img_path = dir / "images" / t.image;
    if (!fs::exists(img_path))
      throw std::runtime_error("missing image file for triplet " + std::to_string(t.id) +
                               ": " + t.image);
    int w = 0, h = 0;
    std::vector<std::uint8_t> rgb = read_ppm(img_path, w, h);
    if (w != h) throw std::runtime_error("non-square image " + t.image);
    if (ds.image_size == 0) ds.image_size = w;
    if (w != ds.image_size)
      throw std::runtime_error("inconsistent image size in " + t.image);
    ds.images.emplace(t.scene_id, std::move(rgb));
  }
  return ds;
}

}  // namespace vqacl
