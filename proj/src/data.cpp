#include "q2a/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace q2a {

namespace {

constexpr char kFormatLine[] = "q2avqa-dataset v1";
constexpr unsigned kOccupancyPercent = 45;

const char* kShapeNames[] = {"none", "circle", "square", "triangle"};
const char* kShapePlural[] = {"", "circles", "squares", "triangles"};
const char* kColorNames[] = {"red", "green", "blue", "yellow"};

}  // namespace

std::string shape_name(CellShape s) {
  return kShapeNames[static_cast<int>(s)];
}

std::string color_name(CellColor c) {
  return kColorNames[static_cast<int>(c)];
}

// ---- ImageGrid ------------------------------------------------------------

std::vector<double> ImageGrid::cell_features() const {
  std::vector<double> out(cells.size() * kCellFeatureDim, 0.0);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const Cell& cell = cells[i];
    double* f = out.data() + i * kCellFeatureDim;
    if (cell.shape != CellShape::None) {
      f[static_cast<int>(cell.shape) - 1] = 1.0;
      f[kNumShapeKinds + static_cast<int>(cell.color)] = 1.0;
    }
  }
  return out;
}

// ---- vocabularies ---------------------------------------------------------

AnswerVocabulary AnswerVocabulary::for_grid(std::size_t grid_size) {
  AnswerVocabulary v;
  v.answers_ = {"yes", "no"};
  for (std::size_t c = 0; c < kNumColors; ++c)
    v.answers_.push_back(kColorNames[c]);
  for (std::size_t n = 0; n <= grid_size * grid_size; ++n)
    v.answers_.push_back(std::to_string(n));
  return v;
}

const std::string& AnswerVocabulary::answer(std::size_t idx) const {
  if (idx >= answers_.size())
    throw std::out_of_range("AnswerVocabulary: index " + std::to_string(idx) +
                            " out of range (C=" +
                            std::to_string(answers_.size()) + ")");
  return answers_[idx];
}

std::size_t AnswerVocabulary::index_of(const std::string& answer) const {
  auto it = std::find(answers_.begin(), answers_.end(), answer);
  if (it == answers_.end())
    throw std::out_of_range("AnswerVocabulary: unknown answer \"" + answer +
                            "\"");
  return static_cast<std::size_t>(it - answers_.begin());
}

bool AnswerVocabulary::contains(const std::string& answer) const {
  return std::find(answers_.begin(), answers_.end(), answer) != answers_.end();
}

void AnswerVocabulary::add(const std::string& answer) {
  if (!contains(answer)) answers_.push_back(answer);
}

TokenVocabulary::TokenVocabulary() {
  tokens_ = {"<pad>", "is",      "there",   "a",        "red",
             "green",  "blue",   "yellow",  "circle",   "square",
             "triangle", "what", "color",   "the",      "how",
             "many",   "circles", "squares", "triangles"};
}

std::size_t TokenVocabulary::id_of(const std::string& token) const {
  auto it = std::find(tokens_.begin(), tokens_.end(), token);
  if (it == tokens_.end())
    throw std::out_of_range("TokenVocabulary: unknown token \"" + token +
                            "\"");
  return static_cast<std::size_t>(it - tokens_.begin());
}

const std::string& TokenVocabulary::token(std::size_t id) const {
  if (id >= tokens_.size())
    throw std::out_of_range("TokenVocabulary: id out of range");
  return tokens_[id];
}

std::vector<std::size_t> TokenVocabulary::tokenize(
    const std::string& text) const {
  std::vector<std::size_t> ids;
  std::istringstream in(text);
  std::string word;
  while (in >> word) ids.push_back(id_of(word));
  return ids;
}

// ---- generation -----------------------------------------------------------

namespace {

ImageGrid random_grid(std::size_t grid_size, Rng& rng) {
  ImageGrid g;
  g.grid_size = grid_size;
  g.cells.resize(grid_size * grid_size);
  for (auto& cell : g.cells) {
    if (rng.chance_percent(kOccupancyPercent)) {
      cell.shape = static_cast<CellShape>(1 + rng.uniform_index(3));
      cell.color = static_cast<CellColor>(rng.uniform_index(4));
    }
  }
  return g;
}

bool pair_present(const ImageGrid& g, CellColor color, CellShape shape) {
  for (const auto& cell : g.cells)
    if (cell.shape == shape && cell.color == color) return true;
  return false;
}

std::size_t shape_count(const ImageGrid& g, CellShape shape) {
  std::size_t n = 0;
  for (const auto& cell : g.cells)
    if (cell.shape == shape) ++n;
  return n;
}

VqaSample make_closed(const ImageGrid& g, Rng& rng,
                      const TokenVocabulary& tv) {
  const bool want_yes = rng.chance_percent(50);
  std::vector<std::pair<CellColor, CellShape>> candidates;
  for (int c = 0; c < 4; ++c)
    for (int s = 1; s <= 3; ++s) {
      const auto color = static_cast<CellColor>(c);
      const auto shape = static_cast<CellShape>(s);
      if (pair_present(g, color, shape) == want_yes)
        candidates.emplace_back(color, shape);
    }
  CellColor color;
  CellShape shape;
  bool answer_yes = want_yes;
  if (!candidates.empty()) {
    auto [c, s] = candidates[rng.uniform_index(candidates.size())];
    color = c;
    shape = s;
  } else {
    // Grid has every pair (or none); the requested answer is unavailable.
    color = static_cast<CellColor>(rng.uniform_index(4));
    shape = static_cast<CellShape>(1 + rng.uniform_index(3));
    answer_yes = pair_present(g, color, shape);
  }
  VqaSample s;
  s.image = g;
  s.question_text = "is there a " + color_name(color) + " " +
                    shape_name(shape);
  s.question_tokens = tv.tokenize(s.question_text);
  s.answer_class = answer_yes ? 0 : 1;
  s.qtype = QuestionType::Closed;
  return s;
}

VqaSample make_count(const ImageGrid& g, Rng& rng, const TokenVocabulary& tv,
                     const AnswerVocabulary& av) {
  const auto shape = static_cast<CellShape>(1 + rng.uniform_index(3));
  VqaSample s;
  s.image = g;
  s.question_text =
      std::string("how many ") + kShapePlural[static_cast<int>(shape)];
  s.question_tokens = tv.tokenize(s.question_text);
  s.answer_class = av.index_of(std::to_string(shape_count(g, shape)));
  s.qtype = QuestionType::Open;
  return s;
}

VqaSample make_open(const ImageGrid& g, Rng& rng, const TokenVocabulary& tv,
                    const AnswerVocabulary& av) {
  if (rng.chance_percent(50)) {
    // Color question, only valid when the referenced shape is unique.
    std::vector<CellShape> unique_shapes;
    for (int s = 1; s <= 3; ++s)
      if (shape_count(g, static_cast<CellShape>(s)) == 1)
        unique_shapes.push_back(static_cast<CellShape>(s));
    if (!unique_shapes.empty()) {
      const CellShape shape =
          unique_shapes[rng.uniform_index(unique_shapes.size())];
      CellColor color = CellColor::Red;
      for (const auto& cell : g.cells)
        if (cell.shape == shape) color = cell.color;
      VqaSample s;
      s.image = g;
      s.question_text = "what color is the " + shape_name(shape);
      s.question_tokens = tv.tokenize(s.question_text);
      s.answer_class = av.index_of(color_name(color));
      s.qtype = QuestionType::Open;
      return s;
    }
  }
  return make_count(g, rng, tv, av);
}

}  // namespace

Dataset generate_dataset(std::size_t n_samples, std::size_t grid_size,
                         std::uint64_t seed) {
  if (n_samples < 1)
    throw std::invalid_argument("generate_dataset: n_samples must be >= 1");
  if (grid_size < 1)
    throw std::invalid_argument("generate_dataset: grid_size must be >= 1");
  Dataset ds;
  ds.vocab = AnswerVocabulary::for_grid(grid_size);
  TokenVocabulary tv;
  Rng rng(seed);
  ds.samples.reserve(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const ImageGrid g = random_grid(grid_size, rng);
    if (rng.chance_percent(50))
      ds.samples.push_back(make_closed(g, rng, tv));
    else
      ds.samples.push_back(make_open(g, rng, tv, ds.vocab));
  }
  return ds;
}

// ---- rule-based oracle ----------------------------------------------------

std::string rule_based_answer(const VqaSample& sample) {
  std::istringstream in(sample.question_text);
  std::vector<std::string> words;
  std::string w;
  while (in >> w) words.push_back(w);
  const ImageGrid& g = sample.image;

  if (words.size() == 5 && words[0] == "is" && words[1] == "there") {
    int color = -1, shape = -1;
    for (int c = 0; c < 4; ++c)
      if (words[3] == kColorNames[c]) color = c;
    for (int s = 1; s <= 3; ++s)
      if (words[4] == kShapeNames[s]) shape = s;
    if (color < 0 || shape < 0)
      throw std::invalid_argument("rule_based_answer: bad closed question \"" +
                                  sample.question_text + "\"");
    return pair_present(g, static_cast<CellColor>(color),
                        static_cast<CellShape>(shape))
               ? "yes"
               : "no";
  }
  if (words.size() == 5 && words[0] == "what" && words[1] == "color") {
    for (int s = 1; s <= 3; ++s) {
      if (words[4] == kShapeNames[s]) {
        const auto shape = static_cast<CellShape>(s);
        if (shape_count(g, shape) != 1)
          throw std::invalid_argument(
              "rule_based_answer: shape not unique for \"" +
              sample.question_text + "\"");
        for (const auto& cell : g.cells)
          if (cell.shape == shape) return color_name(cell.color);
      }
    }
  }
  if (words.size() == 3 && words[0] == "how" && words[1] == "many") {
    for (int s = 1; s <= 3; ++s)
      if (words[2] == kShapePlural[s])
        return std::to_string(shape_count(g, static_cast<CellShape>(s)));
  }
  throw std::invalid_argument("rule_based_answer: unrecognized question \"" +
                              sample.question_text + "\"");
}

// ---- encoding -------------------------------------------------------------

EncodedSample encode_sample(const VqaSample& sample, const TokenVocabulary& tv,
                            std::size_t max_question_tokens) {
  EncodedSample e;
  e.image_features = sample.image.cell_features();
  e.num_cells = sample.image.cells.size();
  e.token_ids = sample.question_tokens;
  for (std::size_t id : e.token_ids)
    if (id >= tv.size())
      throw std::out_of_range("encode_sample: token id " + std::to_string(id) +
                              " outside vocabulary");
  if (e.token_ids.size() > max_question_tokens) {
    e.token_ids.resize(max_question_tokens);
    e.truncated = true;
  }
  while (e.token_ids.size() < max_question_tokens)
    e.token_ids.push_back(tv.pad_id());
  e.answer_class = sample.answer_class;
  e.qtype = sample.qtype;
  return e;
}

// ---- serialization --------------------------------------------------------

namespace {

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

[[noreturn]] void record_error(std::size_t line_no, const std::string& what) {
  throw std::runtime_error("load_dataset: malformed record at line " +
                           std::to_string(line_no) + ": " + what);
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out)
    throw std::runtime_error("save_dataset: cannot open \"" + path +
                             "\" for writing");
  // Header: format tag, grid size, answer vocabulary (field order frozen).
  std::size_t grid_size = ds.samples.empty() ? 4 : ds.samples[0].image.grid_size;
  out << kFormatLine << "\tgrid=" << grid_size
      << "\tanswers=" << join(ds.vocab.answers(), ',') << "\n";
  for (const auto& s : ds.samples) {
    std::vector<std::string> cells;
    cells.reserve(s.image.cells.size());
    for (const auto& cell : s.image.cells)
      cells.push_back(std::to_string(static_cast<int>(cell.shape)) + ":" +
                      std::to_string(static_cast<int>(cell.color)));
    std::vector<std::string> toks;
    toks.reserve(s.question_tokens.size());
    for (std::size_t id : s.question_tokens)
      toks.push_back(std::to_string(id));
    out << "cells=" << join(cells, ';') << "\tq=" << s.question_text
        << "\ttoks=" << join(toks, ' ')
        << "\tans=" << ds.vocab.answer(s.answer_class) << "\ttype="
        << (s.qtype == QuestionType::Closed ? "closed" : "open") << "\n";
  }
  if (!out) throw std::runtime_error("save_dataset: write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in)
    throw std::runtime_error("load_dataset: cannot open \"" + path + "\"");
  std::string header;
  if (!std::getline(in, header) || header.empty())
    throw std::runtime_error("load_dataset: missing header in \"" + path +
                             "\"");
  auto hfields = split(header, '\t');
  if (hfields.size() != 3 || hfields[0] != kFormatLine)
    throw std::runtime_error(
        "load_dataset: version mismatch or bad header, expected \"" +
        std::string(kFormatLine) + "\", got \"" + hfields[0] + "\"");
  if (hfields[1].rfind("grid=", 0) != 0 || hfields[2].rfind("answers=", 0) != 0)
    throw std::runtime_error("load_dataset: bad header fields");
  const std::size_t grid_size = std::stoul(hfields[1].substr(5));
  Dataset ds;
  for (const auto& a : split(hfields[2].substr(8), ','))
    ds.vocab.add(a);

  std::string line;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    if (fields.size() != 5) record_error(line_no, "expected 5 fields");
    for (std::size_t i = 0; i < 5; ++i) {
      static const char* kPrefixes[] = {"cells=", "q=", "toks=", "ans=",
                                        "type="};
      if (fields[i].rfind(kPrefixes[i], 0) != 0)
        record_error(line_no, std::string("missing field ") + kPrefixes[i]);
    }
    VqaSample s;
    s.image.grid_size = grid_size;
    try {
      for (const auto& cellstr : split(fields[0].substr(6), ';')) {
        auto parts = split(cellstr, ':');
        if (parts.size() != 2) record_error(line_no, "bad cell " + cellstr);
        Cell cell;
        const int shape = std::stoi(parts[0]);
        const int color = std::stoi(parts[1]);
        if (shape < 0 || shape > 3 || color < 0 || color > 3)
          record_error(line_no, "cell value out of range: " + cellstr);
        cell.shape = static_cast<CellShape>(shape);
        cell.color = static_cast<CellColor>(color);
        s.image.cells.push_back(cell);
      }
      if (s.image.cells.size() != grid_size * grid_size)
        record_error(line_no, "wrong cell count");
      s.question_text = fields[1].substr(2);
      if (!fields[2].substr(5).empty())
        for (const auto& t : split(fields[2].substr(5), ' '))
          s.question_tokens.push_back(std::stoul(t));
      s.answer_class = ds.vocab.index_of(fields[3].substr(4));
      const std::string type = fields[4].substr(5);
      if (type == "closed")
        s.qtype = QuestionType::Closed;
      else if (type == "open")
        s.qtype = QuestionType::Open;
      else
        record_error(line_no, "bad qtype \"" + type + "\"");
    } catch (const std::runtime_error&) {
      throw;
    } catch (const std::exception& e) {
      record_error(line_no, e.what());
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace q2a
