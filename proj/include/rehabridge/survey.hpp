#pragma once

#include "rehabridge/csv.hpp"
#include "rehabridge/error.hpp"
#include "rehabridge/keyvalue.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace rehabridge::survey {

enum class Level { VerySatisfied, Satisfied, Neutral, Unsatisfied, VeryUnsatisfied };

inline constexpr std::size_t kLevels = 5;
inline constexpr std::array<std::string_view, kLevels> kLevelNames{"VerySatisfied", "Satisfied", "Neutral",
                                                                   "Unsatisfied", "VeryUnsatisfied"};
inline constexpr std::array<std::string_view, kLevels> kLevelHeadings{"Very Satisfied", "Satisfied", "Neutral",
                                                                      "Unsatisfied", "Very Unsatisfied"};

constexpr std::string_view to_string(Level l) noexcept { return kLevelNames[static_cast<std::size_t>(l)]; }

/// Accepts a level name or its 1-based position on the scale.
inline std::optional<Level> parse_level(std::string_view s) {
  for (std::size_t i = 0; i < kLevels; ++i) {
    if (s == kLevelNames[i] || (s.size() == 1 && s[0] == static_cast<char>('1' + i))) {
      return static_cast<Level>(i);
    }
  }
  return std::nullopt;
}

struct Category {
  std::string name;
  std::vector<std::string> question_ids;

  bool operator==(const Category&) const = default;
};

struct Questionnaire {
  std::vector<Category> categories;

  bool operator==(const Questionnaire&) const = default;

  std::vector<std::string> question_ids() const {
    std::vector<std::string> out;
    for (const auto& c : categories) {
      out.insert(out.end(), c.question_ids.begin(), c.question_ids.end());
    }
    return out;
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& c : categories) {
      if (c.name.empty() || c.question_ids.empty()) {
        throw Error(ErrorCode::InvalidResponse, "category '" + c.name + "' has no questions");
      }
      for (const auto& q : c.question_ids) {
        if (!seen.insert(q).second) {
          throw Error(ErrorCode::InvalidResponse, "question " + q + " belongs to more than one category");
        }
      }
    }
  }
};

/// The nine-question instrument used with the bridge.
inline Questionnaire standard_questionnaire() {
  return Questionnaire{{
      {"Robot Convenience", {"q1", "q2", "q3"}},
      {"Robot Safety", {"q4"}},
      {"Making Entertainment and Motivation with Games", {"q5"}},
      {"Concentration", {"q6"}},
      {"Simplicity in Use", {"q7"}},
      {"Tolerance for Tasks and the Degree of Difficulty", {"q8"}},
      {"Causes Pain and Fatigue", {"q9"}},
  }};
}

/// `[questionnaire]` config section: `category.<n> = <name> | <qid> <qid> ...`,
/// ordered by n. Falls back to the standard instrument when absent.
inline Questionnaire questionnaire_from(const kv::Document& doc, const std::string& prefix = "questionnaire.") {
  std::map<int, Category> ordered;
  for (const auto& [key, value] : doc.entries()) {
    if (key.rfind(prefix + "category.", 0) != 0) {
      continue;
    }
    const auto n_text = key.substr(prefix.size() + 9);
    int n = 0;
    try {
      n = std::stoi(n_text);
    } catch (const std::exception&) {
      throw Error(ErrorCode::ParseError, "bad questionnaire key " + key);
    }
    const auto bar = value.find('|');
    if (bar == std::string::npos) {
      throw Error(ErrorCode::ParseError, key + " must be '<name> | <question ids>'");
    }
    Category c;
    c.name = value.substr(0, value.find_last_not_of(' ', bar - 1) + 1);
    std::istringstream ids(value.substr(bar + 1));
    for (std::string q; ids >> q;) {
      c.question_ids.push_back(q);
    }
    ordered[n] = std::move(c);
  }
  if (ordered.empty()) {
    return standard_questionnaire();
  }
  Questionnaire q;
  for (auto& [n, c] : ordered) {
    q.categories.push_back(std::move(c));
  }
  q.validate();
  return q;
}

struct SurveyResponse {
  std::string subject_id;
  std::map<std::string, Level> answers;

  bool operator==(const SurveyResponse&) const = default;
};

// ---------------------------------------------------------------------------
// Exact percentages
// ---------------------------------------------------------------------------

/// count / total as a percentage, kept exact.
struct Share {
  std::int64_t count = 0;
  std::int64_t total = 1;

  /// Reduced fraction of 100 * count / total, e.g. "340/9".
  std::string exact_percent() const {
    const std::int64_t num = 100 * count;
    const std::int64_t g = std::gcd(num, total);
    const std::int64_t n = num / g;
    const std::int64_t d = total / g;
    return d == 1 ? std::to_string(n) : std::to_string(n) + "/" + std::to_string(d);
  }

  /// Percentage in hundredths, rounded half up.
  std::int64_t hundredths() const { return (2 * 10000 * count + total) / (2 * total); }

  std::string rendered() const {
    const auto h = hundredths();
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%lld.%02lld", static_cast<long long>(h / 100), static_cast<long long>(h % 100));
    return buf;
  }

  double value() const { return 100.0 * static_cast<double>(count) / static_cast<double>(total); }
};

struct CategorySummary {
  std::string name;
  std::size_t question_count = 0;
  std::size_t subjects = 0;
  std::array<std::int64_t, kLevels> counts{};

  std::int64_t answers() const { return static_cast<std::int64_t>(question_count * subjects); }
  Share share(std::size_t level) const { return {counts[level], answers()}; }

  bool operator==(const CategorySummary&) const = default;
};

inline std::vector<CategorySummary> aggregate(const std::vector<SurveyResponse>& responses, const Questionnaire& q) {
  q.validate();
  if (responses.empty()) {
    throw Error(ErrorCode::IncompleteResponse, "no responses to aggregate");
  }
  for (const auto& r : responses) {
    for (const auto& id : q.question_ids()) {
      if (!r.answers.count(id)) {
        throw Error(ErrorCode::IncompleteResponse, "subject " + r.subject_id + " did not answer " + id);
      }
    }
  }
  std::vector<CategorySummary> out;
  for (const auto& c : q.categories) {
    CategorySummary s;
    s.name = c.name;
    s.question_count = c.question_ids.size();
    s.subjects = responses.size();
    for (const auto& r : responses) {
      for (const auto& id : c.question_ids) {
        ++s.counts[static_cast<std::size_t>(r.answers.at(id))];
      }
    }
    out.push_back(s);
  }
  return out;
}

/// All count vectors over `total` answers whose half-up 2-decimal percentages
/// lie within 0.01 of `percentages`.
inline std::vector<std::array<std::int64_t, kLevels>> reconstruct_counts(
    const std::array<double, kLevels>& percentages, std::int64_t total) {
  if (total < 1 || total > 1000) {
    throw Error(ErrorCode::Unreconstructable, "total answers must be in [1, 1000]");
  }
  std::array<std::vector<std::int64_t>, kLevels> candidates;
  for (std::size_t i = 0; i < kLevels; ++i) {
    const auto target = std::llround(percentages[i] * 100.0);
    for (std::int64_t c = 0; c <= total; ++c) {
      if (std::llabs(Share{c, total}.hundredths() - target) <= 1) {
        candidates[i].push_back(c);
      }
    }
  }
  std::vector<std::array<std::int64_t, kLevels>> matches;
  std::array<std::int64_t, kLevels> current{};
  const auto search = [&](auto&& self, std::size_t level, std::int64_t remaining) -> void {
    if (level == kLevels - 1) {
      if (std::binary_search(candidates[level].begin(), candidates[level].end(), remaining)) {
        current[level] = remaining;
        matches.push_back(current);
      }
      return;
    }
    for (const auto c : candidates[level]) {
      if (c > remaining) {
        break;
      }
      current[level] = c;
      self(self, level + 1, remaining - c);
    }
  };
  search(search, 0, total);
  if (matches.empty()) {
    throw Error(ErrorCode::Unreconstructable, "no count vector over " + std::to_string(total) +
                                                  " answers reproduces the given percentages");
  }
  return matches;
}

inline std::string render_table(const std::vector<CategorySummary>& rows) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"Type of Questions", "Number of Questions"};
  header.insert(header.end(), kLevelHeadings.begin(), kLevelHeadings.end());
  cells.push_back(header);
  for (const auto& s : rows) {
    std::vector<std::string> row{s.name, std::to_string(s.question_count)};
    for (std::size_t i = 0; i < kLevels; ++i) {
      row.push_back(s.share(i).rendered() + "%");
    }
    cells.push_back(row);
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      width[i] = std::max(width[i], row[i].size());
    }
  }
  std::string out;
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      const auto pad = std::string(width[i] - row[i].size(), ' ');
      out += i == 0 ? row[i] + pad : "  " + pad + row[i];
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Import / export
// ---------------------------------------------------------------------------

/// One row per subject: `subject_id,<qid>,...`. Cells hold a level name or
/// 1..5; an empty cell is an unanswered question.
inline std::vector<SurveyResponse> responses_from_csv(std::string_view text) {
  const auto rows = csv::parse(text);
  if (rows.empty() || rows[0].empty() || rows[0][0] != "subject_id") {
    throw Error(ErrorCode::InvalidResponse, "response CSV must start with a subject_id column");
  }
  const auto& header = rows[0];
  std::vector<SurveyResponse> out;
  std::set<std::string> subjects;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() == 1 && row[0].empty()) {
      continue;
    }
    if (row.size() != header.size()) {
      throw Error(ErrorCode::InvalidResponse, "row " + std::to_string(r + 1) + " has " + std::to_string(row.size()) +
                                                  " fields, expected " + std::to_string(header.size()));
    }
    SurveyResponse resp;
    resp.subject_id = row[0];
    if (!subjects.insert(resp.subject_id).second) {
      throw Error(ErrorCode::InvalidResponse, "duplicate subject " + resp.subject_id);
    }
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c].empty()) {
        continue;
      }
      const auto level = parse_level(row[c]);
      if (!level) {
        throw Error(ErrorCode::InvalidResponse,
                    "subject " + resp.subject_id + ", " + header[c] + ": unknown level '" + row[c] + "'");
      }
      resp.answers[header[c]] = *level;
    }
    out.push_back(std::move(resp));
  }
  return out;
}

inline std::string responses_to_csv(const std::vector<SurveyResponse>& responses, const Questionnaire& q) {
  std::string out;
  csv::Row header{"subject_id"};
  const auto ids = q.question_ids();
  header.insert(header.end(), ids.begin(), ids.end());
  csv::append_row(out, header);
  for (const auto& r : responses) {
    csv::Row row{r.subject_id};
    for (const auto& id : ids) {
      const auto it = r.answers.find(id);
      row.push_back(it == r.answers.end() ? "" : std::to_string(static_cast<int>(it->second) + 1));
    }
    csv::append_row(out, row);
  }
  return out;
}

inline std::string summary_csv(const std::vector<CategorySummary>& rows) {
  std::string out;
  csv::append_row(out, {"category", "question_count", "very_satisfied", "satisfied", "neutral", "unsatisfied",
                        "very_unsatisfied"});
  for (const auto& s : rows) {
    csv::Row row{s.name, std::to_string(s.question_count)};
    for (std::size_t i = 0; i < kLevels; ++i) {
      row.push_back(s.share(i).rendered());
    }
    csv::append_row(out, row);
  }
  return out;
}

inline nlohmann::json summary_json(const std::vector<CategorySummary>& rows) {
  auto out = nlohmann::json::array();
  for (const auto& s : rows) {
    nlohmann::json levels = nlohmann::json::object();
    for (std::size_t i = 0; i < kLevels; ++i) {
      const auto share = s.share(i);
      levels[std::string(kLevelNames[i])] = {
          {"count", share.count}, {"exact_percent", share.exact_percent()}, {"percent", share.rendered()}};
    }
    out.push_back({{"category", s.name},
                   {"question_count", s.question_count},
                   {"subjects", s.subjects},
                   {"answers", s.answers()},
                   {"levels", levels}});
  }
  return out;
}

}  // namespace rehabridge::survey
