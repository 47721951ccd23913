#pragma once

// Independent answer oracle for the synthetic question templates: parses the
// question TEXT, tallies the scene grid directly, and re-derives the answer
// with its own binning rules. Shares no code with the generator's
// template-to-answer path.

#include <algorithm>
#include <cctype>
#include <stdexcept>
#include <string>

#include "vqacl/synth.hpp"

namespace rule_eval {

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline int tally(const vqacl::Scene& scene, vqacl::Cell kind) {
  int n = 0;
  for (vqacl::Cell c : scene.cells) n += (c == kind) ? 1 : 0;
  return n;
}

// maps a noun phrase (singular or plural) to a cell kind
inline vqacl::Cell category_from_phrase(const std::string& phrase) {
  using vqacl::Cell;
  if (phrase.find("small building") != std::string::npos) return Cell::kBuildingSmall;
  if (phrase.find("large building") != std::string::npos) return Cell::kBuildingLarge;
  if (phrase.find("road") != std::string::npos) return Cell::kRoad;
  if (phrase.find("water") != std::string::npos) return Cell::kWater;
  if (phrase.find("tree") != std::string::npos) return Cell::kTree;
  if (phrase.find("field") != std::string::npos) return Cell::kField;
  throw std::runtime_error("rule evaluator: unknown category in '" + phrase + "'");
}

inline std::string bin_count(int n) {
  n = std::min(n, 16);
  if (n == 0) return "0";
  if (n == 1) return "1";
  if (n == 2) return "2";
  if (n == 3) return "3";
  if (n == 4) return "4";
  if (n >= 5 && n <= 10) return "5-10";
  return "11+";
}

inline std::string bin_area(int n) {
  if (n <= 0) return "zero";
  if (n <= 4) return "small";
  if (n <= 12) return "medium";
  return "large";
}

inline std::string answer_from_scene(const std::string& question, const vqacl::Scene& scene) {
  const std::string q = lower(question);

  if (q.find("rural or an urban") != std::string::npos)
    return scene.urban ? "urban" : "rural";

  if (q.find("present") != std::string::npos)
    return tally(scene, category_from_phrase(q)) > 0 ? "yes" : "no";

  const std::string more = "are there more ";
  if (q.rfind(more, 0) == 0) {
    const std::size_t than = q.find(" than ");
    if (than == std::string::npos)
      throw std::runtime_error("rule evaluator: malformed comparison '" + question + "'");
    const std::string first = q.substr(more.size(), than - more.size());
    const std::string second = q.substr(than + 6);
    const int a = tally(scene, category_from_phrase(first));
    const int b = tally(scene, category_from_phrase(second));
    return a > b ? "yes" : "no";
  }

  const std::string amount = "what is the amount of ";
  if (q.rfind(amount, 0) == 0)
    return bin_count(tally(scene, category_from_phrase(q.substr(amount.size()))));

  const std::string area = "what is the area covered by ";
  if (q.rfind(area, 0) == 0)
    return bin_area(tally(scene, category_from_phrase(q.substr(area.size()))));

  throw std::runtime_error("rule evaluator: unrecognized question '" + question + "'");
}

}  // namespace rule_eval
