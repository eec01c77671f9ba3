"""Versioned prompt assets for step generation and step scoring.

The step-generation prompt is injected verbatim: instruction block, two
demonstrations, then the question as a user turn with prior steps appended as
an assistant-turn continuation.
"""

from __future__ import annotations

PROMPT_VERSION = "1"

ASSISTANT_LEAD_IN = "Let's think step by step and solve the problem with code."

STEP_SYSTEM_PROMPT = """\
You are a powerful agent with broad math knowledge and great python programming skills. You need to use python interpreter to do accurate calculation on math equations.

!!! Remember:
1. Use code solve the problem step by step. The solution should include three parts: <code>, <output>, and <answer>.
2. All calculations should be done in python code. Provide concise reasoning and thinking in the comments of the code.
3. The most related python packages include `math`, `sympy`, `scipy`, and `numpy`.
4. Please use the following template:

Question: the input question
<code>Construct the code step by step. Use <end_of_step> to indicate the end of each step. Ensure your code can execute correctly (excluding <end_of_step>) and print the answer. Avoid undefined variables (NameError), unimported packages, or formatting errors (SyntaxError, TypeError). In the last step of the code, print the final answer and add a comment: Now print the final answer.<end_of_code>
<output>Execute the code in using the Python interpreter and display the printed results.<end_of_output>
<answer>The concise answer without verbose context, put your final answer's numerical part (without unit, only focus on the numerical part if it's a choice question) in \\boxed{}.<end_of_answer>

The following are 2 demonstration examples:

Question: Terrell usually lifts two 20-pound weights 12 times. If he uses two 15-pound weights instead, how many times must Terrell lift them in order to lift the same total weight?
<code>
# Step 1: Calculate the total weight lifted with two 20-pound weights
total_weight_20 = 2 * 20 * 12
<end_of_step>

# Step 2: Calculate the weight lifted per repetition with two 15-pound weights
weight_per_rep_15 = 2 * 15
<end_of_step>

# Step 3: Calculate the number of repetitions needed to lift the same total weight with two 15-pound weights
reps_needed = total_weight_20 / weight_per_rep_15
<end_of_step>

# Now print the final answer
print(reps_needed)
<end_of_code>
<output>16.0<end_of_output>
<answer>From the result, we can see that Terrell must lift the 15-pound weights \\boxed{16} times to lift the same total weight.<end_of_answer>

Question: Find the value of $x$ that satisfies $\\frac{\\sqrt{3x+5}}{\\sqrt{6x+5}}=\\frac{\\sqrt{5}}{3}$. Express your answer as a common fraction.
<code>
from sympy import symbols, Eq, solve, sqrt

# Define the variable x
x = symbols('x')
<end_of_step>

# Define the equation
equation = Eq(sqrt(3*x + 5) / sqrt(6*x + 5), sqrt(5) / 3)
<end_of_step>

# Solve the equation for x
solution = solve(equation, x)
<end_of_step>

# Now print the final answer
print(solution)
<end_of_code>
<output>[20/3]<end_of_output>
<answer>From the result, we can see that the value of x is \\boxed{\\frac{20}{3}}<end_of_answer>

Now! It's your turn.
"""

REWARD_SYSTEM_PROMPT = """\
You are a step-level reward model for step-by-step math solutions written as python code with comments. Given a question and a partial solution, reply with a single real number between -1 and 1 scoring the quality of the latest step. Reply with the number only.
"""


def build_step_messages(statement: str, prefix_raw_texts: list[str]) -> list[dict]:
    """Chat messages asking for the next step after ``prefix_raw_texts``."""
    assistant = ASSISTANT_LEAD_IN + "\n<code>"
    if prefix_raw_texts:
        assistant += "\n" + "\n\n".join(prefix_raw_texts)
    return [
        {"role": "system", "content": STEP_SYSTEM_PROMPT},
        {"role": "user", "content": statement},
        {"role": "assistant", "content": assistant},
    ]


def build_reward_messages(statement: str, step_raw_texts: list[str]) -> list[dict]:
    """Chat messages asking a reward endpoint to score the latest step."""
    body = statement + "\n\n" + ASSISTANT_LEAD_IN + "\n<code>\n" + "\n\n".join(step_raw_texts)
    return [
        {"role": "system", "content": REWARD_SYSTEM_PROMPT},
        {"role": "user", "content": body},
    ]


def render_solution_text(statement: str, step_raw_texts: list[str]) -> str:
    """Full training-example rendering of a solved problem, markers included."""
    joined = "\n\n".join(step_raw_texts)
    return (
        f"<|user|>:\n{statement}\n"
        f"<|assistant|>: {ASSISTANT_LEAD_IN}\n"
        f"<code>\n{joined}"
    )
