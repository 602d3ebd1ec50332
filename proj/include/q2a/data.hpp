#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "q2a/rng.hpp"

namespace q2a {

enum class CellShape : int { None = 0, Circle = 1, Square = 2, Triangle = 3 };
enum class CellColor : int { Red = 0, Green = 1, Blue = 2, Yellow = 3 };

constexpr std::size_t kNumShapeKinds = 3;  // one-hot block, None encodes as zeros
constexpr std::size_t kNumColors = 4;
constexpr std::size_t kCellFeatureDim = kNumShapeKinds + kNumColors;

struct Cell {
  CellShape shape = CellShape::None;
  CellColor color = CellColor::Red;  // meaningful only when shape != None

  bool operator==(const Cell&) const = default;
};

struct ImageGrid {
  std::size_t grid_size = 4;
  std::vector<Cell> cells;  // grid_size^2 entries, row-major

  // Fixed-width one-hot feature per cell: 3 shape slots + 4 color slots,
  // all zero for an empty cell.
  std::vector<double> cell_features() const;

  bool operator==(const ImageGrid&) const = default;
};

enum class QuestionType { Closed, Open };

struct VqaSample {
  ImageGrid image;
  std::string question_text;
  std::vector<std::size_t> question_tokens;
  std::size_t answer_class = 0;
  QuestionType qtype = QuestionType::Closed;

  bool operator==(const VqaSample&) const = default;
};

// Answer string <-> class index. Index 0 is "yes", index 1 is "no".
class AnswerVocabulary {
 public:
  static AnswerVocabulary for_grid(std::size_t grid_size);

  std::size_t size() const { return answers_.size(); }
  const std::string& answer(std::size_t idx) const;
  std::size_t index_of(const std::string& answer) const;
  bool contains(const std::string& answer) const;
  const std::vector<std::string>& answers() const { return answers_; }

  void add(const std::string& answer);

  bool operator==(const AnswerVocabulary&) const = default;

 private:
  std::vector<std::string> answers_;
};

// Closed question-word vocabulary; id 0 is reserved for padding.
class TokenVocabulary {
 public:
  TokenVocabulary();

  std::size_t size() const { return tokens_.size(); }
  std::size_t pad_id() const { return 0; }
  std::size_t id_of(const std::string& token) const;  // throws on unknown
  const std::string& token(std::size_t id) const;

  std::vector<std::size_t> tokenize(const std::string& text) const;

 private:
  std::vector<std::string> tokens_;
};

struct Dataset {
  std::vector<VqaSample> samples;
  AnswerVocabulary vocab;

  bool operator==(const Dataset&) const = default;
};

// Deterministic procedural generator. Closed questions ("is there a <color>
// <shape>") target a 50/50 yes/no balance; open questions mix "what color is
// the <shape>" (emitted only when that shape is unique) and "how many
// <shape>s". Closed/open mix is ~50/50.
Dataset generate_dataset(std::size_t n_samples, std::size_t grid_size,
                         std::uint64_t seed);

// Independent rule evaluator: re-answers a sample's question from its grid.
// Used as the consistency oracle.
std::string rule_based_answer(const VqaSample& sample);

struct EncodedSample {
  std::vector<double> image_features;  // N x kCellFeatureDim row-major
  std::size_t num_cells = 0;
  std::vector<std::size_t> token_ids;  // padded/truncated to length M
  std::size_t answer_class = 0;
  QuestionType qtype = QuestionType::Closed;
  bool truncated = false;
};

EncodedSample encode_sample(const VqaSample& sample, const TokenVocabulary& tv,
                            std::size_t max_question_tokens);

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

std::string shape_name(CellShape s);
std::string color_name(CellColor c);

}  // namespace q2a
