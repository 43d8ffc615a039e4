#pragma once

// Turn-taking contract of one episode, checked from its transcript alone.

#include <algorithm>
#include <string>

#include "rmmnav/gameplay.hpp"

namespace protocol {

/// Empty when `t` obeys the game rules, otherwise the first violation.
inline std::string violation(const rmmnav::Transcript& t, const rmmnav::GameConfig& g) {
  using rmmnav::EventKind;
  if (t.num_actions > g.max_actions) return "more than max_actions actions";
  if (static_cast<int>(t.exchanges.size()) > g.max_exchanges) return "more than max_exchanges exchanges";
  for (int len : t.context_lengths) {
    if (len > g.history_cap) return "navigator context over the history cap";
  }
  int acts = 0, questions = 0;
  bool ended = false;
  for (std::size_t i = 0; i < t.events.size(); ++i) {
    const auto& e = t.events[i];
    if (ended) return "event after Stop";
    if (e.kind == EventKind::Act) {
      ++acts;
      if (e.t != acts) return "action counter out of step";
      if (e.payload == "stop") ended = true;
    } else if (e.kind == EventKind::Question) {
      ++questions;
      const int expected_at = g.question_first ? (questions - 1) * g.question_interval : questions * g.question_interval;
      if (acts != expected_at) return "question at action " + std::to_string(acts);
      if (i + 1 >= t.events.size() || t.events[i + 1].kind != EventKind::Answer) return "question without answer";
    } else if (i == 0 || t.events[i - 1].kind != EventKind::Question) {
      return "answer without question";
    }
  }
  if (acts != t.num_actions) return "num_actions disagrees with the events";
  if (ended != t.stopped) return "stopped flag disagrees with the events";
  // No question point was skipped: one after every `interval` actions that
  // did not end the episode.
  int expected = g.question_first ? 1 : 0;
  for (int k = g.question_interval; k <= acts; k += g.question_interval) {
    const bool terminal = (k == acts && t.stopped) || k >= g.max_actions;
    if (!terminal) ++expected;
  }
  if (questions != std::min(expected, g.max_exchanges)) return "wrong number of questions";
  return {};
}

}  // namespace protocol
