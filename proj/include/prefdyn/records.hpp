#pragma once

namespace prefdyn {

// (x, y_w, y_l): prompt, preferred output, dispreferred output.
struct PreferenceTriple {
  int x = 0;
  int y_w = 0;
  int y_l = 0;

  friend bool operator==(const PreferenceTriple&, const PreferenceTriple&) = default;
};

// (x, y_w) supervised pair for the lower-level SFT objective.
struct SftPair {
  int x = 0;
  int y_w = 0;

  friend bool operator==(const SftPair&, const SftPair&) = default;
};

}  // namespace prefdyn
