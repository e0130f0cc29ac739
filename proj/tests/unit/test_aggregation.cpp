#include <doctest.h>

#include <algorithm>
#include <vector>

#include "hm/aggregation.hpp"

using namespace hm;
using namespace hm::aggregation;
using L = ClassLabel;

namespace {

// Brute-force references written directly from the decision rules.
L ref_patient(const std::vector<L>& r) {
  if (std::find(r.begin(), r.end(), L::Present) != r.end()) return L::Present;
  if (std::find(r.begin(), r.end(), L::Unknown) != r.end()) return L::Unknown;
  return L::Absent;
}

L ref_record(const std::vector<L>& s) {
  const L order[] = {L::Present, L::Unknown, L::Absent};
  long best_count = -1;
  L best = L::Absent;
  for (L c : order) {
    const long n = std::count(s.begin(), s.end(), c);
    if (n > best_count) {
      best_count = n;
      best = c;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("record label examples") {
  CHECK(record_label(std::vector{L::Absent, L::Present, L::Absent}) == L::Absent);
  CHECK(record_label(std::vector{L::Present, L::Absent}) == L::Present);
  CHECK(record_label(std::vector{L::Unknown, L::Absent, L::Present}) == L::Present);
  CHECK(record_label(std::vector{L::Unknown, L::Absent}) == L::Unknown);
  CHECK_THROWS_AS(record_label(std::vector<L>{}), Error);
}

TEST_CASE("patient label examples") {
  CHECK(patient_label(std::vector{L::Absent, L::Absent, L::Present}) == L::Present);
  CHECK(patient_label(std::vector{L::Absent, L::Unknown}) == L::Unknown);
  CHECK(patient_label(std::vector{L::Absent}) == L::Absent);
  CHECK_THROWS_AS(patient_label(std::vector<L>{}), Error);
}

TEST_CASE("patient label matches the reference on all 27 triples") {
  int n = 0;
  for (L a : kAllLabels) {
    for (L b : kAllLabels) {
      for (L c : kAllLabels) {
        const std::vector<L> v{a, b, c};
        CHECK(patient_label(v) == ref_patient(v));
        ++n;
      }
    }
  }
  CHECK(n == 27);
}

TEST_CASE("record label matches the count-and-priority reference up to length 5") {
  for (int len = 1; len <= 5; ++len) {
    int total = 1;
    for (int i = 0; i < len; ++i) total *= 3;
    for (int code = 0; code < total; ++code) {
      std::vector<L> v;
      for (int i = 0, c = code; i < len; ++i, c /= 3) v.push_back(label_from_index(c % 3));
      CHECK(record_label(v) == ref_record(v));
    }
  }
}

TEST_CASE("confidence roll-up examples") {
  const std::vector<Scored> a{{L::Present, 0.9}, {L::Absent, 0.8}};
  CHECK(decide_record(a).label == L::Present);
  CHECK(decide_record(a).confidence == doctest::Approx(0.9));
  CHECK(decide_record(a).tie_break);

  const std::vector<Scored> b{{L::Absent, 0.6}, {L::Absent, 0.8}};
  CHECK(decide_record(b).confidence == doctest::Approx(0.7));
  CHECK_FALSE(decide_record(b).tie_break);

  std::vector<RecordDecision> recs(3);
  recs[0].label = L::Present;
  recs[0].confidence = 0.9;
  recs[1].label = L::Present;
  recs[1].confidence = 0.7;
  recs[2].label = L::Absent;
  recs[2].confidence = 0.99;
  const auto p = decide_patient(recs);
  CHECK(p.label == L::Present);
  CHECK(p.confidence == doctest::Approx(0.8));
  CHECK(p.contributing_records == std::vector<std::size_t>{0, 1});
  CHECK_FALSE(p.low_support);
}

TEST_CASE("low support is flagged when a contributing record came from a tie") {
  const auto tied = decide_record(std::vector<Scored>{{L::Present, 0.5}, {L::Absent, 0.9}});
  const auto clear = decide_record(std::vector<Scored>{{L::Absent, 0.9}});
  const auto p = decide_patient(std::vector{tied, clear});
  CHECK(p.label == L::Present);
  CHECK(p.low_support);
}

TEST_CASE("roll-up requires a matching item") {
  CHECK_THROWS_AS(roll_up_confidence(std::vector<Scored>{{L::Absent, 0.5}}, L::Present), Error);
}

TEST_CASE("decisions are invariant to input order") {
  std::vector<Scored> s{{L::Absent, 0.6}, {L::Present, 0.7}, {L::Absent, 0.9}, {L::Unknown, 0.4}, {L::Present, 0.8}};
  const auto ref = decide_record(s);
  std::sort(s.begin(), s.end(), [](const Scored& a, const Scored& b) { return a.confidence < b.confidence; });
  do {
    const auto d = decide_record(s);
    CHECK(d.label == ref.label);
    CHECK(d.confidence == doctest::Approx(ref.confidence));
  } while (std::next_permutation(s.begin(), s.end(),
                                 [](const Scored& a, const Scored& b) { return a.confidence < b.confidence; }));
}

TEST_CASE("adding a present record keeps a present patient present") {
  for (L a : kAllLabels) {
    for (L b : kAllLabels) {
      std::vector<L> v{a, b, L::Present};
      REQUIRE(patient_label(v) == L::Present);
      v.push_back(L::Present);
      CHECK(patient_label(v) == L::Present);
    }
  }
}

TEST_CASE("unanimous inputs give that label and the plain mean") {
  for (L c : kAllLabels) {
    const std::vector<Scored> s{{c, 0.2}, {c, 0.5}, {c, 0.8}};
    const auto d = decide_record(s);
    CHECK(d.label == c);
    CHECK(d.confidence == doctest::Approx(0.5));
    CHECK(d.contributing_segments.size() == 3);
  }
}
