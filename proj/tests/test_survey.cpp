#include "rehabridge/survey.hpp"
#include "support/table1.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <sstream>

using namespace rehabridge;
using namespace rehabridge::survey;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<SurveyResponse> table1_responses() {
  return responses_from_csv(read_file(std::string(REHABRIDGE_RESOURCES) + "/table1_responses.csv"));
}

// Plain enumeration with printf rounding, kept separate from the library search.
std::vector<std::array<std::int64_t, 5>> brute_force(const std::array<double, 5>& pct, int n) {
  std::vector<std::array<std::int64_t, 5>> out;
  const auto close = [&](int c, double p) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * c / n + 1e-9);
    return std::abs(std::stod(buf) - p) <= 0.01 + 1e-9;
  };
  for (int a = 0; a <= n; ++a)
    for (int b = 0; a + b <= n; ++b)
      for (int c = 0; a + b + c <= n; ++c)
        for (int d = 0; a + b + c + d <= n; ++d) {
          const int e = n - a - b - c - d;
          if (close(a, pct[0]) && close(b, pct[1]) && close(c, pct[2]) && close(d, pct[3]) && close(e, pct[4])) {
            out.push_back({a, b, c, d, e});
          }
        }
  return out;
}

}  // namespace

TEST(Survey, StandardInstrumentHasSevenCategoriesNineQuestions) {
  const auto q = standard_questionnaire();
  EXPECT_EQ(q.categories.size(), 7U);
  EXPECT_EQ(q.question_ids().size(), 9U);
  EXPECT_NO_THROW(q.validate());
}

TEST(Survey, PrintedTableCountsAreUniqueUnderBruteForce) {
  for (const auto& row : rehabridge::testing::kTable1) {
    const auto matches = brute_force(row.printed, row.answers);
    ASSERT_EQ(matches.size(), 1U) << row.name;
    EXPECT_EQ(matches[0], row.counts) << row.name;
  }
}

TEST(Survey, ReconstructAgreesWithBruteForce) {
  for (const auto& row : rehabridge::testing::kTable1) {
    EXPECT_EQ(reconstruct_counts(row.printed, row.answers), brute_force(row.printed, row.answers)) << row.name;
  }
}

TEST(Survey, ReconstructExamples) {
  const auto safety = reconstruct_counts({53.33, 33.33, 13.33, 0, 0}, 15);
  ASSERT_EQ(safety.size(), 1U);
  EXPECT_EQ(safety[0], (std::array<std::int64_t, 5>{8, 5, 2, 0, 0}));
  for (const int n : {1, 7, 15, 45, 1000}) {
    const auto all = reconstruct_counts({100, 0, 0, 0, 0}, n);
    ASSERT_EQ(all.size(), 1U);
    EXPECT_EQ(all[0], (std::array<std::int64_t, 5>{n, 0, 0, 0, 0}));
  }
  try {
    reconstruct_counts({50, 50, 0, 0, 0}, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Unreconstructable);
  }
  EXPECT_THROW(reconstruct_counts({100, 0, 0, 0, 0}, 1001), Error);
}

TEST(Survey, Table1DatasetReproducesThePrintedTable) {
  const auto responses = table1_responses();
  ASSERT_EQ(responses.size(), 15U);
  const auto rows = aggregate(responses, standard_questionnaire());
  ASSERT_EQ(rows.size(), rehabridge::testing::kTable1.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& expected = rehabridge::testing::kTable1[r];
    EXPECT_EQ(rows[r].name, expected.name);
    EXPECT_EQ(rows[r].answers(), expected.answers);
    for (std::size_t i = 0; i < kLevels; ++i) {
      const auto printed = std::llround(expected.printed[i] * 100.0);
      EXPECT_LE(std::llabs(rows[r].share(i).hundredths() - printed), 1) << expected.name << " level " << i;
    }
  }
}

TEST(Survey, ExactSharesSumToOneHundred) {
  for (const auto& row : aggregate(table1_responses(), standard_questionnaire())) {
    std::int64_t sum = 0;
    for (const auto c : row.counts) {
      sum += c;
    }
    EXPECT_EQ(sum, row.answers());
  }
}

TEST(Survey, SimplicityAndConvenienceRendering) {
  const auto rows = aggregate(table1_responses(), standard_questionnaire());
  EXPECT_EQ(rows[4].share(0).rendered(), "66.67");
  EXPECT_EQ(rows[4].share(1).rendered(), "33.33");
  EXPECT_EQ(rows[0].share(0).rendered(), "37.78");
  EXPECT_EQ(rows[0].share(1).rendered(), "42.22");
  EXPECT_EQ(rows[0].share(2).rendered(), "13.33");
  EXPECT_EQ(rows[0].share(3).rendered(), "6.67");
  EXPECT_EQ(rows[0].share(0).exact_percent(), "340/9");
  EXPECT_EQ((Share{1, 8}.rendered()), "12.50");
  EXPECT_EQ((Share{2, 3}.rendered()), "66.67");
  EXPECT_EQ((Share{1, 16}.rendered()), "6.25");
  EXPECT_EQ((Share{1, 800}.rendered()), "0.13");  // 0.125 rounds half up
}

TEST(Survey, SingleSubjectAllVerySatisfied) {
  SurveyResponse r{"only", {}};
  for (const auto& id : standard_questionnaire().question_ids()) {
    r.answers[id] = Level::VerySatisfied;
  }
  for (const auto& row : aggregate({r}, standard_questionnaire())) {
    EXPECT_EQ(row.share(0).rendered(), "100.00");
    for (std::size_t i = 1; i < kLevels; ++i) {
      EXPECT_EQ(row.share(i).rendered(), "0.00");
    }
  }
}

TEST(Survey, IncompleteResponseNamesSubjectAndQuestion) {
  auto responses = table1_responses();
  responses[3].answers.erase("q7");
  try {
    aggregate(responses, standard_questionnaire());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IncompleteResponse);
    EXPECT_NE(std::string(e.what()).find("s04"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("q7"), std::string::npos);
  }
  EXPECT_THROW(aggregate({}, standard_questionnaire()), Error);
}

TEST(Survey, AggregateIsPermutationInvariant) {
  auto responses = table1_responses();
  const auto base = aggregate(responses, standard_questionnaire());
  std::mt19937 rng(2);
  for (int i = 0; i < 10; ++i) {
    std::shuffle(responses.begin(), responses.end(), rng);
    auto q = standard_questionnaire();
    for (auto& c : q.categories) {
      std::shuffle(c.question_ids.begin(), c.question_ids.end(), rng);
    }
    EXPECT_EQ(aggregate(responses, q), base);
  }
}

TEST(Survey, ReconstructionContainsTrueCountsForRandomData) {
  std::mt19937 rng(9);
  const Questionnaire q{{{"a", {"x", "y"}}, {"b", {"z"}}}};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<SurveyResponse> responses;
    const int n = 1 + static_cast<int>(rng() % 20);
    for (int s = 0; s < n; ++s) {
      SurveyResponse r{"s" + std::to_string(s), {}};
      for (const auto& id : {"x", "y", "z"}) {
        r.answers[id] = static_cast<Level>(rng() % 5);
      }
      responses.push_back(r);
    }
    for (const auto& row : aggregate(responses, q)) {
      std::array<double, kLevels> pct{};
      for (std::size_t i = 0; i < kLevels; ++i) {
        pct[i] = std::stod(row.share(i).rendered());
      }
      const auto matches = reconstruct_counts(pct, row.answers());
      EXPECT_NE(std::find(matches.begin(), matches.end(), row.counts), matches.end());
    }
  }
}

TEST(Survey, RenderTableShape) {
  const auto empty = render_table({});
  EXPECT_EQ(std::count(empty.begin(), empty.end(), '\n'), 1);
  const auto rows = aggregate(table1_responses(), standard_questionnaire());
  const auto one = render_table({rows[1]});
  EXPECT_EQ(std::count(one.begin(), one.end(), '\n'), 2);
  EXPECT_NE(one.find("Robot Safety"), std::string::npos);
  EXPECT_NE(one.find("53.33%"), std::string::npos);
  const auto all = render_table(rows);
  EXPECT_EQ(std::count(all.begin(), all.end(), '\n'), 8);
  EXPECT_LT(all.find("Robot Convenience"), all.find("Causes Pain and Fatigue"));
}

TEST(Survey, CsvAndJsonExports) {
  const auto responses = table1_responses();
  EXPECT_EQ(responses_from_csv(responses_to_csv(responses, standard_questionnaire())), responses);
  const auto rows = aggregate(responses, standard_questionnaire());
  const auto parsed = csv::parse(summary_csv(rows));
  ASSERT_EQ(parsed.size(), 8U);
  EXPECT_EQ(parsed[0][2], "very_satisfied");
  EXPECT_EQ(parsed[1], (csv::Row{"Robot Convenience", "3", "37.78", "42.22", "13.33", "6.67", "0.00"}));
  const auto j = summary_json(rows);
  EXPECT_EQ(j[0]["levels"]["Unsatisfied"]["count"], 3);
  EXPECT_EQ(j[0]["levels"]["Unsatisfied"]["exact_percent"], "20/3");
  EXPECT_EQ(j[6]["subjects"], 15);
}

TEST(Survey, CsvImportErrors) {
  EXPECT_THROW(responses_from_csv("who,q1\nx,1\n"), Error);
  EXPECT_THROW(responses_from_csv("subject_id,q1\nx,7\n"), Error);
  EXPECT_THROW(responses_from_csv("subject_id,q1\nx,1\nx,2\n"), Error);
  EXPECT_THROW(responses_from_csv("subject_id,q1\nx,1,2\n"), Error);
  const auto named = responses_from_csv("subject_id,q1\nx,Neutral\ny,\n");
  EXPECT_EQ(named[0].answers.at("q1"), Level::Neutral);
  EXPECT_TRUE(named[1].answers.empty());
}

TEST(Survey, QuestionnaireFromConfig) {
  const auto doc = kv::Document::parse(
      "[questionnaire]\ncategory.2 = Second | q3\ncategory.1 = First Thing | q1 q2\n");
  const auto q = questionnaire_from(doc);
  ASSERT_EQ(q.categories.size(), 2U);
  EXPECT_EQ(q.categories[0], (Category{"First Thing", {"q1", "q2"}}));
  EXPECT_EQ(q.categories[1], (Category{"Second", {"q3"}}));
  EXPECT_EQ(questionnaire_from(kv::Document{}), standard_questionnaire());
  EXPECT_THROW(questionnaire_from(kv::Document::parse("[questionnaire]\ncategory.1 = A | q1\ncategory.2 = B | q1\n")),
               Error);
}
